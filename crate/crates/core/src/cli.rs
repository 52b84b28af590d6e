//! `train`, `eval`, `ablate` and `analyze` commands.
//!
//! Each command is also a library function so examples and tests can drive
//! it without a subprocess. Exit codes: 0 success, 1 usage or configuration
//! error, 2 divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{self, ImportanceExport};
use crate::checkpoint;
use crate::config::{RunConfig, TaskData};
use crate::data::{Dataset, Example, Vocab};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Extraction, Model, Variant};
use crate::training::{self, metric_key, EpochRecord, TrainReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";

#[derive(Debug, Parser)]
#[command(name = "hire", version, about = "Train, evaluate, ablate and analyze hidden-representation extraction models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write checkpoint, metrics and config echo.
    Train(RunArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train every variant under every seed and report per-variant medians.
    Ablate(AblateArgs),
    /// Export per-example and mean importance distributions.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration leaf, e.g. `--set optimizer.lr_peak=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// full, no_hire, no_fusion, fixed:<mean|random>:<all|first_k|last_k> or fusion_layers:<g>.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Override the checkpoint's task, e.g. `--set task.dev=other.tsv`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Also write the report to this JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "full,no_hire,no_fusion")]
    pub variant: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the PPM heatmap.
    #[arg(long)]
    pub no_heatmap: bool,
}

/// Resolves config file, overrides and the dedicated flags into one config.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut sets = args.set.clone();
    if let Some(seed) = args.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(out) = &args.out {
        sets.push(format!("out={}", out.display()));
    }
    if let Some(v) = &args.variant {
        sets.push(format!("model.variant={v}"));
    }
    RunConfig::load(args.config.as_deref(), &sets)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

fn metrics_line(record: &EpochRecord) -> String {
    let mut line = serde_json::Map::new();
    line.insert("epoch".into(), json!(record.epoch));
    line.insert("train_loss".into(), json!(record.train_loss));
    for (k, v) in &record.dev.values {
        line.insert(format!("dev_{k}"), json!(v));
    }
    line.insert("dev_degenerate".into(), json!(record.dev.degenerate));
    Value::Object(line).to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains one model described by `config` and writes its artifacts to
/// `config.out`. `log` receives one line per epoch.
pub fn train_command(config: &RunConfig, mut log: impl FnMut(&str)) -> Result<TrainOutcome> {
    let (resolved, data) = config.prepare()?;
    create_dir(&resolved.out)?;
    write_file(
        &resolved.out.join(CONFIG_ECHO_FILE),
        serde_json::to_string_pretty(&resolved)?.as_bytes(),
    )?;
    let metrics_path = resolved.out.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut model = Model::new(resolved.model.clone(), resolved.seed)?;
    let mut write_err = None;
    let report = training::train(
        &mut model,
        &data.train,
        &data.dev,
        &resolved.optimizer,
        resolved.seed,
        |record| {
            let line = metrics_line(record);
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err.get_or_insert(e);
            }
            log(&line);
        },
    )?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    let checkpoint = resolved.out.join(CHECKPOINT_FILE);
    save_model(&checkpoint, &resolved, &data.vocab, &model)?;
    Ok(TrainOutcome {
        config: resolved,
        report,
        checkpoint,
    })
}

pub fn save_model(path: &Path, config: &RunConfig, vocab: &Vocab, model: &Model) -> Result<()> {
    let meta = json!({ "config": config, "vocab": vocab });
    checkpoint::save(path, &meta, model.params())
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: Model,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(path)?;
    let field = |name: &str| {
        ckpt.meta
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {name:?}")))
    };
    let config: RunConfig = serde_json::from_value(field("config")?)?;
    let vocab: Vocab = serde_json::from_value(field("vocab")?)?;
    let model = Model::from_params(config.model.clone(), config.seed, ckpt.params)?;
    Ok(LoadedModel { config, vocab, model })
}

/// Loads the task of `config` encoded with an existing vocabulary.
pub fn task_with_vocab(config: &RunConfig, vocab: &Vocab) -> Result<TaskData> {
    let (mut train, mut dev) = config.load_splits()?;
    let max_len = config.model.encoder.max_len;
    train.encode(vocab, max_len);
    dev.encode(vocab, max_len);
    Ok(TaskData {
        train,
        dev,
        vocab: vocab.clone(),
    })
}

pub fn eval_command(checkpoint: &Path, overrides: &[String], split: &str) -> Result<MetricReport> {
    let loaded = load_model(checkpoint)?;
    let config = loaded.config.with_overrides(overrides)?;
    let data = task_with_vocab(&config, &loaded.vocab)?;
    let dataset = data.split(split)?;
    if dataset.spec.outputs() != loaded.model.config().outputs {
        return Err(Error::Config(format!(
            "task {} needs {} outputs but the checkpoint head has {}",
            dataset.spec.name,
            dataset.spec.outputs(),
            loaded.model.config().outputs
        )));
    }
    training::evaluate(&loaded.model, dataset, config.optimizer.batch_size)
}

/// Outcome of one (variant, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub metric: Option<f64>,
    pub error: Option<String>,
    /// Mean importance over the dev split, when the variant has one.
    pub mean_s: Option<Vec<f64>>,
    /// Largest per-layer spread of `S` across dev examples.
    pub s_spread: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub median: Option<f64>,
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Median of the values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn cell_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{}-seed{seed}", variant.replace(':', "_")))
}

fn run_cell(base: &RunConfig, variant: Variant, seed: u64) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut config = base.clone();
    config.model.variant = variant;
    config.seed = seed;
    config.out = cell_dir(&base.out, &variant.to_string(), seed);
    let outcome = train_command(&config, |_| {})?;
    let loaded = load_model(&outcome.checkpoint)?;
    let s = match loaded.model.extraction() {
        Extraction::Dynamic(_) | Extraction::Fixed(_) => {
            let data = task_with_vocab(&loaded.config, &loaded.vocab)?;
            let refs: Vec<&Example> = data.dev.examples.iter().collect();
            Some(analysis::importance_matrix(&loaded.model, &refs)?)
        }
        _ => None,
    };
    Ok((outcome.report.best_metric, s))
}

fn spread(rows: &[Vec<f64>]) -> f64 {
    let width = rows.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| {
            let col = rows.iter().map(|r| r[j]);
            col.clone().fold(f64::NEG_INFINITY, f64::max) - col.fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Trains every (variant, seed) cell. A failing cell is recorded and the
/// sweep continues. Writes `ablation.jsonl` (one line per cell) and
/// `ablation.csv` (one row per variant) under `base.out`.
pub fn ablate_command(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut log: impl FnMut(&AblationCell),
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    create_dir(&base.out)?;
    let mut rows = Vec::new();
    let mut jsonl = String::new();
    for &variant in variants {
        let mut cells = Vec::new();
        for &seed in seeds {
            let name = variant.to_string();
            let cell = match run_cell(base, variant, seed) {
                Ok((metric, s)) => AblationCell {
                    variant: name,
                    seed,
                    metric: Some(metric),
                    error: None,
                    mean_s: s.as_ref().map(|rows| analysis::column_mean(rows)),
                    s_spread: s.as_ref().map(|rows| spread(rows)),
                },
                Err(e) => AblationCell {
                    variant: name,
                    seed,
                    metric: None,
                    error: Some(e.to_string()),
                    mean_s: None,
                    s_spread: None,
                },
            };
            jsonl.push_str(&serde_json::to_string(&cell)?);
            jsonl.push('\n');
            log(&cell);
            cells.push(cell);
        }
        let ok: Vec<f64> = cells.iter().filter_map(|c| c.metric).collect();
        rows.push(AblationRow {
            variant: variant.to_string(),
            median: median(&ok),
            cells,
        });
    }
    let table = AblationTable {
        metric: metric_key(base.task.spec().primary_metric).to_string(),
        seeds: seeds.to_vec(),
        rows,
    };
    write_file(&base.out.join("ablation.jsonl"), jsonl.as_bytes())?;
    write_ablation_csv(&base.out.join("ablation.csv"), &table)?;
    Ok(table)
}

fn cell_text(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |m| format!("{m:.4}"))
}

pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    let header = ["variant".to_string(), format!("median_{}", table.metric)]
        .into_iter()
        .chain(table.seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(header).map_err(csv_err)?;
    for row in &table.rows {
        let record = [row.variant.clone(), cell_text(row.median)]
            .into_iter()
            .chain(row.cells.iter().map(|c| cell_text(c.metric)));
        w.write_record(record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed-width text rendering of an ablation table.
pub fn format_table(table: &AblationTable) -> String {
    let width = table.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$}  {:>10}", "variant", format!("median {}", table.metric));
    for s in &table.seeds {
        out.push_str(&format!("  {:>8}", format!("seed {s}")));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!("{:<width$}  {:>10}", row.variant, cell_text(row.median)));
        for c in &row.cells {
            out.push_str(&format!("  {:>8}", cell_text(c.metric)));
        }
        out.push('\n');
    }
    out
}

/// Writes `per_example_s.csv`, `mean_s.csv` and optionally `heatmap.ppm`.
pub fn analyze_command(checkpoint: &Path, split: &str, out: &Path, heatmap: bool) -> Result<ImportanceExport> {
    let loaded = load_model(checkpoint)?;
    if !loaded.model.config().variant.has_dynamic_hire() {
        return Err(Error::Config(format!(
            "checkpoint variant {} has no dynamic extractor; analyze needs per-example importance",
            loaded.model.config().variant
        )));
    }
    let data = task_with_vocab(&loaded.config, &loaded.vocab)?;
    let dataset: &Dataset = data.split(split)?;
    let export = analysis::analyze(&loaded.model, dataset)?;
    create_dir(out)?;
    analysis::write_per_example_csv(&out.join("per_example_s.csv"), &export.per_example)?;
    analysis::write_mean_csv(&out.join("mean_s.csv"), &[(export.task.clone(), export.mean.clone())])?;
    if heatmap {
        analysis::write_heatmap(&out.join("heatmap.ppm"), &export.per_example)?;
    }
    Ok(export)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 2,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = resolve_config(&args)?;
            let start = Instant::now();
            let outcome = train_command(&config, |line| println!("{line}"))?;
            println!(
                "best epoch {} ({} {:.4}) in {:.1}s; wrote {}",
                outcome.report.best_epoch,
                metric_key(outcome.config.task.spec().primary_metric),
                outcome.report.best_metric,
                start.elapsed().as_secs_f64(),
                outcome.config.out.display()
            );
        }
        Command::Eval(args) => {
            let report = eval_command(&args.checkpoint, &args.set, &args.split)?;
            let text = serde_json::to_string_pretty(&report.to_json())?;
            println!("{text}");
            if let Some(path) = args.out {
                write_file(&path, text.as_bytes())?;
            }
        }
        Command::Ablate(args) => {
            let run_args = RunArgs {
                config: args.config,
                set: args.set,
                seed: None,
                out: args.out,
                variant: None,
            };
            let config = resolve_config(&run_args)?;
            let variants = args
                .variant
                .iter()
                .map(|v| v.parse())
                .collect::<Result<Vec<Variant>>>()?;
            let table = ablate_command(&config, &variants, &args.seed, |cell| match (&cell.metric, &cell.error) {
                (Some(m), _) => eprintln!("{} seed {}: {m:.4}", cell.variant, cell.seed),
                (None, Some(e)) => eprintln!("{} seed {}: failed: {e}", cell.variant, cell.seed),
                _ => {}
            })?;
            print!("{}", format_table(&table));
        }
        Command::Analyze(args) => {
            let export = analyze_command(&args.checkpoint, &args.split, &args.out, !args.no_heatmap)?;
            let mean: Vec<String> = export.mean.iter().map(|v| format!("{v:.4}")).collect();
            println!(
                "{} examples; mean S = [{}]; wrote {}",
                export.per_example.len(),
                mean.join(", "),
                args.out.display()
            );
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
