//! Trains the full model on the synthetic majority task and prints one line
//! per epoch.
//!
//!     cargo run --example train_synthetic -- [out_dir]

use hire::cli::train_command;
use hire::RunConfig;

fn main() -> hire::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-train".into());
    let config = RunConfig::load(
        None,
        &[
            "task.train_size=400".into(),
            "task.dev_size=100".into(),
            "optimizer.max_epochs=5".into(),
            format!("out={out}"),
        ],
    )?;
    let outcome = train_command(&config, |line| println!("{line}"))?;
    println!(
        "best epoch {} with dev accuracy {:.4}; checkpoint at {}",
        outcome.report.best_epoch,
        outcome.report.best_metric,
        outcome.checkpoint.display()
    );
    Ok(())
}
