use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hire::analysis::{column_mean, read_importance_csv};
use hire::cli::{
    ablate_command, analyze_command, eval_command, exit_code, format_table, load_model, median, train_command,
    CHECKPOINT_FILE, CONFIG_ECHO_FILE, METRICS_FILE,
};
use hire::extractor::{FixedKind, LayerRange};
use hire::{Error, RunConfig, Variant};

const TINY: &[&str] = &[
    "model.encoder.layers=2",
    "model.encoder.hidden=8",
    "model.encoder.heads=2",
    "model.encoder.ffn_dim=16",
    "model.encoder.max_len=16",
    "task.train_size=64",
    "task.dev_size=32",
    "task.seq_len=6",
    "optimizer.max_epochs=2",
    "optimizer.batch_size=16",
];

fn tiny_sets(out: &Path, extra: &[&str]) -> Vec<String> {
    TINY.iter()
        .chain(extra)
        .map(|s| s.to_string())
        .chain([format!("out={}", out.display())])
        .collect()
}

fn tiny_config(out: &Path, extra: &[&str]) -> RunConfig {
    RunConfig::load(None, &tiny_sets(out, extra)).unwrap()
}

fn toy_spec() -> serde_json::Value {
    serde_json::json!({
        "name": "toy",
        "kind": {"type": "classification", "labels": 2},
        "primary_metric": "accuracy",
        "sentence_pair": false,
    })
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hire"))
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let config = tiny_config(&a, &[]);
    train_command(&config, |_| {}).unwrap();
    for file in [CHECKPOINT_FILE, METRICS_FILE, CONFIG_ECHO_FILE] {
        assert!(a.join(file).is_file(), "{file}");
    }
    let metrics = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let checkpoint = fs::read(a.join(CHECKPOINT_FILE)).unwrap();
    train_command(&config, |_| {}).unwrap();
    assert_eq!(metrics, fs::read_to_string(a.join(METRICS_FILE)).unwrap());
    assert_eq!(checkpoint, fs::read(a.join(CHECKPOINT_FILE)).unwrap());
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "train_loss", "dev_accuracy", "dev_f1", "dev_matthews", "dev_degenerate"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    let echo: RunConfig = serde_json::from_str(&fs::read_to_string(a.join(CONFIG_ECHO_FILE)).unwrap()).unwrap();
    assert_eq!(echo.model.outputs, 2);
}

#[test]
fn binary_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cmd = bin();
    cmd.arg("train");
    for s in TINY {
        cmd.args(["--set", s]);
    }
    let status = cmd.args(["--seed", "3", "--out"]).arg(&out).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with('{')).count(), 2);

    let report_path = dir.path().join("eval.json");
    let status = bin()
        .args(["eval", "--checkpoint"])
        .arg(out.join(CHECKPOINT_FILE))
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let keys: Vec<&String> = report["values"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["accuracy", "f1", "matthews"]);
}

#[test]
fn missing_data_path_fails_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/train.tsv");
    let config = serde_json::json!({
        "task": {
            "source": "tsv",
            "spec": toy_spec(),
            "train": missing,
            "dev": missing,
        }
    });
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, config.to_string()).unwrap();
    let output = bin()
        .args(["train", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("nowhere/train.tsv"), "{stderr}");
}

#[test]
fn unknown_keys_list_the_valid_ones() {
    let err = RunConfig::load(None, &["optimizer.lr=0.1".into()]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("optimizer.lr_peak") && msg.contains("model.encoder.hidden"), "{msg}");
    let output = bin().args(["train", "--set", "model.depth=3"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("valid keys"));
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::Divergence { epoch: 1, step: 2, loss: f64::NAN }), 2);
    assert_eq!(exit_code(&Error::Config("x".into())), 1);
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    for sub in ["train", "eval", "ablate", "analyze"] {
        assert_eq!(bin().args([sub, "--help"]).output().unwrap().status.code(), Some(0), "{sub}");
    }
}

fn write_majority_tsv(path: &Path, n: usize) {
    let mut text = String::from("sentence1\tlabel\n");
    for i in 0..n {
        let bits: Vec<&str> = (0..5).map(|j| if (i >> j) & 1 == 1 { "1" } else { "0" }).collect();
        let ones = bits.iter().filter(|b| **b == "1").count();
        text.push_str(&format!("{}\t{}\n", bits.join(" "), usize::from(ones >= 3)));
    }
    fs::write(path, text).unwrap();
}

fn tsv_config(dir: &Path, train: &Path, dev: &Path, out: &Path, extra: &[&str]) -> RunConfig {
    let config = serde_json::json!({
        "task": {
            "source": "tsv",
            "spec": toy_spec(),
            "train": train,
            "dev": dev,
        }
    });
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    let sets: Vec<String> = TINY[..5]
        .iter()
        .chain(extra)
        .map(|s| s.to_string())
        .chain([format!("out={}", out.display())])
        .collect();
    RunConfig::load(Some(&path), &sets).unwrap()
}

#[test]
fn eval_reproduces_a_memorized_task() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("all.tsv");
    write_majority_tsv(&data, 32);
    let extra = [
        "optimizer.max_epochs=60",
        "optimizer.early_stop_patience=60",
        "optimizer.lr_peak=0.003",
        "optimizer.batch_size=8",
        "optimizer.weight_decay=0.0",
    ];
    let config = tsv_config(dir.path(), &data, &data, &dir.path().join("out"), &extra);
    let outcome = train_command(&config, |_| {}).unwrap();
    let report = eval_command(&outcome.checkpoint, &[], "dev").unwrap();
    assert_eq!(report.get("accuracy"), Some(outcome.report.best_metric));
    assert_eq!(report.get("accuracy"), Some(1.0));

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "sentence1\tlabel\n").unwrap();
    let err = eval_command(&outcome.checkpoint, &[format!("task.dev={}", empty.display())], "dev").unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
    assert!(eval_command(&outcome.checkpoint, &[], "test").is_err());
}

fn trained(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    train_command(&tiny_config(&out, extra), |_| {}).unwrap().checkpoint
}

#[test]
fn analyze_exports_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &["task.dev_size=10"]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let export = analyze_command(&ckpt, "dev", &a, true).unwrap();
    analyze_command(&ckpt, "dev", &b, true).unwrap();
    assert_eq!(export.per_example.len(), 10);
    for row in &export.per_example {
        assert_eq!(row.len(), 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let (ids, rows) = read_importance_csv(&a.join("per_example_s.csv")).unwrap();
    assert_eq!(ids.len(), 10);
    assert_eq!(rows, export.per_example);
    let (_, mean) = read_importance_csv(&a.join("mean_s.csv")).unwrap();
    for (x, y) in mean[0].iter().zip(column_mean(&rows)) {
        assert!((x - y).abs() < 1e-9);
    }
    for file in ["per_example_s.csv", "mean_s.csv", "heatmap.ppm"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert!(fs::read(a.join("heatmap.ppm")).unwrap().starts_with(b"P6\n"));
}

#[test]
fn analyze_rejects_models_without_dynamic_importance() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &["model.variant=fixed:mean:all"]);
    let err = analyze_command(&ckpt, "dev", &dir.path().join("x"), false).unwrap_err();
    assert!(err.to_string().contains("dynamic"), "{err}");
    assert!(load_model(&ckpt).is_ok());
}

#[test]
fn median_examples() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[7.0]), Some(7.0));
    assert_eq!(median(&[]), None);
}

#[test]
fn ablation_table_and_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path(), &["optimizer.max_epochs=1"]);
    let fixed = Variant::FixedImportance {
        strategy: FixedKind::Mean,
        range: LayerRange::All,
    };
    // Four fusion layers exceed the limit, so model construction fails.
    let broken = Variant::FusionLayers { layers: 4 };
    let table = ablate_command(&base, &[Variant::NoHire, fixed, broken], &[1], |_| {}).unwrap();
    assert_eq!(table.metric, "accuracy");
    assert_eq!(table.rows.len(), 3);
    let single = &table.rows[0];
    assert_eq!(single.median, single.cells[0].metric);
    assert!(single.cells[0].mean_s.is_none());
    let fixed_cell = &table.rows[1].cells[0];
    assert_eq!(fixed_cell.s_spread, Some(0.0));
    assert!(fixed_cell.mean_s.as_ref().unwrap().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    assert!(table.rows[2].median.is_none());
    assert!(table.rows[2].cells[0].error.is_some());

    let text = format_table(&table);
    assert!(text.lines().nth(3).unwrap().contains("failed"), "{text}");
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variant,median_accuracy,seed_1"));
    assert!(csv.lines().last().unwrap().ends_with("failed,failed"));
    assert_eq!(fs::read_to_string(dir.path().join("ablation.jsonl")).unwrap().lines().count(), 3);
}
