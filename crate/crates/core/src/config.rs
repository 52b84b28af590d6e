//! Run configuration: JSON file plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_tsv, synth_task, Dataset, SynthKind, TaskSpec, TsvLayout, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::numerics::stable_hash;
use crate::training::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic {
        kind: SynthKind,
        train_size: usize,
        dev_size: usize,
        seq_len: usize,
    },
    Tsv {
        spec: TaskSpec,
        #[serde(default)]
        layout: TsvLayout,
        train: PathBuf,
        dev: PathBuf,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Synthetic {
            kind: SynthKind::Majority,
            train_size: 2000,
            dev_size: 500,
            seq_len: 12,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        match self {
            TaskConfig::Synthetic { kind, .. } => kind.spec(),
            TaskConfig::Tsv { spec, .. } => spec.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub task: TaskConfig,
    /// Seeds initialization, dropout and batch order.
    pub seed: u64,
    /// Seeds synthetic data generation, kept apart so seed sweeps share data.
    pub data_seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            task: TaskConfig::default(),
            seed: 0,
            data_seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Train and dev splits encoded with a vocabulary built from the train split.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub dev: Dataset,
    pub vocab: Vocab,
}

impl TaskData {
    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train or dev"))),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for raw in overrides {
            let (key, val) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form key=value")))?;
            let (key, val) = (key.trim(), val.trim());
            if key == "model.variant" {
                let variant: Variant = val.parse()?;
                value["model"]["variant"] = serde_json::to_value(variant)?;
            } else {
                apply_override(&mut value, key, val)?;
            }
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.task.spec().validate()?;
        if let TaskConfig::Synthetic { seq_len, train_size, dev_size, .. } = self.task {
            if seq_len + 1 > self.model.encoder.max_len {
                return Err(Error::Config(format!(
                    "seq_len {seq_len} plus the start token exceeds max_len {}",
                    self.model.encoder.max_len
                )));
            }
            if train_size == 0 || dev_size == 0 {
                return Err(Error::Config("synthetic splits must be non-empty".into()));
            }
        }
        Ok(())
    }

    /// Loads and encodes both splits. The head width follows the task and the
    /// embedding table grows to fit the vocabulary; the returned config
    /// records both.
    pub fn prepare(&self) -> Result<(RunConfig, TaskData)> {
        let (mut train, mut dev) = self.load_splits()?;
        let vocab = Vocab::from_dataset(&train);
        let mut resolved = self.clone();
        resolved.model.outputs = train.spec.outputs();
        resolved.model.encoder.vocab_size = resolved.model.encoder.vocab_size.max(vocab.len());
        resolved.validate()?;
        let max_len = resolved.model.encoder.max_len;
        train.encode(&vocab, max_len);
        dev.encode(&vocab, max_len);
        Ok((resolved, TaskData { train, dev, vocab }))
    }

    /// Raw train and dev splits, not yet tokenized.
    pub fn load_splits(&self) -> Result<(Dataset, Dataset)> {
        Ok(match &self.task {
            TaskConfig::Synthetic {
                kind,
                train_size,
                dev_size,
                seq_len,
            } => (
                synth_task(*kind, *train_size, *seq_len, self.data_seed ^ stable_hash("data.train"))?,
                synth_task(*kind, *dev_size, *seq_len, self.data_seed ^ stable_hash("data.dev"))?,
            ),
            TaskConfig::Tsv {
                spec,
                layout,
                train,
                dev,
            } => (load_tsv(train, spec, layout)?, load_tsv(dev, spec, layout)?),
        })
    }
}

/// Dotted paths of every leaf of a JSON object.
pub fn config_keys(value: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}

/// Sets the leaf at dotted `key`. The value is parsed as JSON when possible
/// and taken as a string otherwise. Unknown keys are rejected with the list
/// of valid ones.
pub fn apply_override(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = |value: &Value| {
        Error::Config(format!(
            "unknown configuration key {key:?}; valid keys: {}",
            config_keys(value).join(", ")
        ))
    };
    let mut node = &*value;
    for part in key.split('.') {
        node = node.get(part).ok_or_else(|| unknown(value))?;
    }
    if node.is_object() && !node.as_object().is_some_and(|m| m.is_empty()) {
        return Err(unknown(value));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for part in key.split('.') {
        slot = slot.get_mut(part).expect("path checked above");
    }
    *slot = parsed;
    Ok(())
}
