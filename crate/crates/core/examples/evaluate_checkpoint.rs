//! Trains a small model, reloads its checkpoint and evaluates both splits.

use hire::cli::{eval_command, train_command};
use hire::RunConfig;

fn main() -> hire::Result<()> {
    let dir = std::env::temp_dir().join("hire-example-eval");
    let config = RunConfig::load(
        None,
        &[
            "task.train_size=300".into(),
            "task.dev_size=100".into(),
            "optimizer.max_epochs=3".into(),
            format!("out={}", dir.display()),
        ],
    )?;
    let outcome = train_command(&config, |_| {})?;
    for split in ["train", "dev"] {
        let report = eval_command(&outcome.checkpoint, &[], split)?;
        println!("{split}: {}", report.to_json());
    }
    // Overrides swap the evaluation data without touching the weights.
    let shifted = eval_command(&outcome.checkpoint, &["data_seed=99".into()], "dev")?;
    println!("dev (data_seed 99): {}", shifted.to_json());
    Ok(())
}
