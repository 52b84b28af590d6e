//! Trains on the parity task, then exports per-example layer weights as CSV
//! and a PPM heatmap.

use hire::cli::{analyze_command, train_command};
use hire::RunConfig;

fn main() -> hire::Result<()> {
    let dir = std::env::temp_dir().join("hire-example-analyze");
    let config = RunConfig::load(
        None,
        &[
            "task.kind=parity".into(),
            "task.train_size=400".into(),
            "task.dev_size=40".into(),
            "optimizer.max_epochs=4".into(),
            format!("out={}", dir.join("run").display()),
        ],
    )?;
    let outcome = train_command(&config, |_| {})?;
    let export = analyze_command(&outcome.checkpoint, "dev", &dir.join("analysis"), true)?;
    for (i, row) in export.per_example.iter().take(5).enumerate() {
        println!("example {i}: {row:.3?}");
    }
    println!("mean S over {} examples: {:.3?}", export.per_example.len(), export.mean);
    println!("heatmap: {}", dir.join("analysis/heatmap.ppm").display());
    Ok(())
}
