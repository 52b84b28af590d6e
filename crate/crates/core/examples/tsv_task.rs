//! Trains on a sentence-pair TSV file with a header row.

use std::fs;

use hire::cli::train_command;
use hire::RunConfig;

fn main() -> hire::Result<()> {
    let dir = std::env::temp_dir().join("hire-example-tsv");
    fs::create_dir_all(&dir).expect("temp dir");
    let words = ["red", "blue", "green", "small", "large", "round"];
    let mut text = String::from("sentence1\tsentence2\tlabel\n");
    for i in 0..120 {
        let a = words[i % words.len()];
        let b = if i % 2 == 0 { a } else { words[(i + 1 + i / 12) % words.len()] };
        text.push_str(&format!("the {a} box\tthe {b} box\t{}\n", usize::from(a == b)));
    }
    let data = dir.join("pairs.tsv");
    fs::write(&data, text).expect("write tsv");

    let config = serde_json::json!({
        "task": {
            "source": "tsv",
            "spec": {
                "name": "pairs",
                "kind": {"type": "classification", "labels": 2},
                "primary_metric": "f1",
                "sentence_pair": true
            },
            "layout": {"text_b": "sentence2"},
            "train": data,
            "dev": data
        },
        "optimizer": {"max_epochs": 15, "batch_size": 16, "early_stop_patience": 5},
        "out": dir.join("run")
    });
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).expect("write config");
    let config = RunConfig::load(Some(&path), &[])?;
    let outcome = train_command(&config, |line| println!("{line}"))?;
    println!("best f1 {:.4}", outcome.report.best_metric);
    Ok(())
}
