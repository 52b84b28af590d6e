//! Computes task metrics for hand-written predictions.

use hire::data::{Label, MetricKind, TaskSpec};
use hire::metrics::{metrics, Predictions};

fn main() -> hire::Result<()> {
    let spec = TaskSpec::classification("acceptability", 2, MetricKind::Matthews);
    let gold: Vec<Label> = [1, 1, 0, 1, 0, 0, 1, 0].map(Label::Class).to_vec();
    let report = metrics(&Predictions::Classes(vec![1, 0, 0, 1, 0, 1, 1, 0]), &gold, &spec)?;
    println!("{}", report.to_json());

    // A constant predictor has no defined correlation; the value is 0 and flagged.
    let constant = metrics(&Predictions::Classes(vec![1; 8]), &gold, &spec)?;
    println!("{}", constant.to_json());

    let sim = TaskSpec::regression("similarity");
    let gold: Vec<Label> = [0.0, 1.5, 2.0, 3.5, 5.0].map(Label::Value).to_vec();
    let report = metrics(&Predictions::Values(vec![0.4, 1.0, 2.5, 3.0, 4.2]), &gold, &sim)?;
    print!("{}", report.to_csv());
    Ok(())
}
