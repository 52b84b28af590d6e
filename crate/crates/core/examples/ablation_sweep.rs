//! Runs a small variant-by-seed sweep and prints the median table.

use hire::cli::{ablate_command, format_table};
use hire::{RunConfig, Variant};

fn main() -> hire::Result<()> {
    let dir = std::env::temp_dir().join("hire-example-ablate");
    let base = RunConfig::load(
        None,
        &[
            "task.train_size=600".into(),
            "task.dev_size=100".into(),
            "optimizer.max_epochs=6".into(),
            format!("out={}", dir.display()),
        ],
    )?;
    let variants: Vec<Variant> = ["full", "no_hire", "no_fusion", "fixed:mean:all", "fusion_layers:0"]
        .iter()
        .map(|v| v.parse())
        .collect::<hire::Result<_>>()?;
    let table = ablate_command(&base, &variants, &[1, 2, 3], |cell| {
        eprintln!("{} seed {}: {:?}", cell.variant, cell.seed, cell.metric);
    })?;
    print!("{}", format_table(&table));
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(())
}
