//! Tokenization, TSV ingestion, synthetic tasks and batching.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::stream;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Matthews,
    Accuracy,
    F1,
    Pearson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    Classification { labels: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub primary_metric: MetricKind,
    pub sentence_pair: bool,
}

impl TaskSpec {
    pub fn classification(name: &str, labels: usize, primary_metric: MetricKind) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Classification { labels },
            primary_metric,
            sentence_pair: false,
        }
    }

    pub fn regression(name: &str) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Regression,
            primary_metric: MetricKind::Pearson,
            sentence_pair: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.primary_metric) {
            (TaskKind::Regression, MetricKind::Pearson) => Ok(()),
            (TaskKind::Regression, m) => Err(Error::Config(format!(
                "task {}: regression tasks report pearson, not {m:?}",
                self.name
            ))),
            (TaskKind::Classification { labels }, _) if labels < 2 => Err(Error::Config(format!(
                "task {}: classification needs at least two labels",
                self.name
            ))),
            (TaskKind::Classification { labels }, MetricKind::Matthews | MetricKind::F1) if labels != 2 => {
                Err(Error::Config(format!(
                    "task {}: matthews and f1 are binary metrics",
                    self.name
                )))
            }
            (TaskKind::Classification { .. }, MetricKind::Pearson) => Err(Error::Config(format!(
                "task {}: pearson is a regression metric",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    /// Head width `m`.
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification { labels } => labels,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_regression(&self) -> bool {
        self.kind == TaskKind::Regression
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: Label,
    /// Token ids after [`Dataset::encode`]; empty before.
    pub ids: Vec<usize>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word-level vocabulary with the four special symbols at ids 0..4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by every distinct lowercased word of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Builds a vocabulary from the training split of a dataset (both segments).
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self::build(
            dataset
                .examples
                .iter()
                .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref())),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// `[<s>, a...]` or `[<s>, a..., </s>, b...]` for sentence pairs.
pub fn tokenize(text_a: &str, text_b: Option<&str>, vocab: &Vocab) -> Vec<usize> {
    let mut ids = vec![START];
    ids.extend(words(text_a).map(|w| vocab.id(&w)));
    if let Some(b) = text_b {
        ids.push(SEP);
        ids.extend(words(b).map(|w| vocab.id(&w)));
    }
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Tokenizes every example, truncating to `max_len` ids.
    pub fn encode(&mut self, vocab: &Vocab, max_len: usize) {
        for e in &mut self.examples {
            let mut ids = tokenize(&e.text_a, e.text_b.as_deref(), vocab);
            ids.truncate(max_len);
            e.ids = ids;
        }
    }
}

/// Column layout of a TSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsvLayout {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: String,
    /// Label strings in class-index order; `None` means labels are already
    /// class indices (classification) or real values (regression).
    pub label_list: Option<Vec<String>>,
}

impl Default for TsvLayout {
    fn default() -> Self {
        TsvLayout {
            text_a: "sentence1".into(),
            text_b: None,
            label: "label".into(),
            label_list: None,
        }
    }
}

/// Reads a tab-separated file with a header row.
pub fn load_tsv(path: &Path, spec: &TaskSpec, layout: &TsvLayout) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data {
                path: path.into(),
                row: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let data_err = |row: usize, msg: String| Error::Data {
        path: path.into(),
        row,
        msg,
    };
    let headers = reader.headers().map_err(|e| data_err(0, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(0, format!("missing column {name:?}")))
    };
    let a_col = column(&layout.text_a)?;
    let b_col = layout.text_b.as_deref().map(column).transpose()?;
    let label_col = column(&layout.label)?;

    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 0
        let row = i + 1;
        let record = record.map_err(|e| data_err(row, e.to_string()))?;
        let field = |c: usize| {
            record
                .get(c)
                .ok_or_else(|| data_err(row, format!("expected at least {} columns, found {}", c + 1, record.len())))
        };
        let text_a = field(a_col)?.to_string();
        let text_b = b_col.map(field).transpose()?.map(str::to_string);
        let raw = field(label_col)?.trim();
        let label = match spec.kind {
            TaskKind::Regression => Label::Value(
                raw.parse::<f64>()
                    .map_err(|_| data_err(row, format!("unparseable regression label {raw:?}")))?,
            ),
            TaskKind::Classification { labels } => {
                let class = match &layout.label_list {
                    Some(list) => list.iter().position(|l| l == raw),
                    None => raw.parse::<usize>().ok(),
                };
                match class {
                    Some(c) if c < labels => Label::Class(c),
                    _ => return Err(data_err(row, format!("unparseable class label {raw:?}"))),
                }
            }
        };
        examples.push(Example {
            text_a,
            text_b,
            label,
            ids: Vec::new(),
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        examples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Binary label: which of the tokens `0`/`1` occurs more often.
    Majority,
    /// Binary label: parity of the number of `1` tokens.
    Parity,
    /// Regression target: fraction of `1` tokens.
    CountFraction,
}

impl SynthKind {
    pub fn spec(self) -> TaskSpec {
        match self {
            SynthKind::Majority => TaskSpec::classification("majority", 2, MetricKind::Accuracy),
            SynthKind::Parity => TaskSpec::classification("parity", 2, MetricKind::Accuracy),
            SynthKind::CountFraction => TaskSpec::regression("count_fraction"),
        }
    }

    /// Label of a token sequence, or `None` for a tied majority sequence.
    pub fn label(self, tokens: &[&str]) -> Option<Label> {
        let ones = tokens.iter().filter(|t| **t == "1").count();
        let zeros = tokens.iter().filter(|t| **t == "0").count();
        match self {
            SynthKind::Majority if ones == zeros => None,
            SynthKind::Majority => Some(Label::Class(usize::from(ones > zeros))),
            SynthKind::Parity => Some(Label::Class(ones % 2)),
            SynthKind::CountFraction => Some(Label::Value(ones as f64 / tokens.len() as f64)),
        }
    }
}

/// Deterministic synthetic dataset of `n_examples` sequences of `seq_len`
/// tokens drawn from `{0, 1}`. Tied majority sequences are redrawn.
pub fn synth_task(kind: SynthKind, n_examples: usize, seq_len: usize, seed: u64) -> Result<Dataset> {
    if seq_len == 0 {
        return Err(Error::Config("synthetic sequences need at least one token".into()));
    }
    let mut rng = stream(seed, "synth_task");
    let mut examples = Vec::with_capacity(n_examples);
    while examples.len() < n_examples {
        let tokens: Vec<&str> = (0..seq_len).map(|_| if rng.random::<bool>() { "1" } else { "0" }).collect();
        let Some(label) = kind.label(&tokens) else { continue };
        examples.push(Example {
            text_a: tokens.join(" "),
            text_b: None,
            label,
            ids: Vec::new(),
        });
    }
    Ok(Dataset {
        spec: kind.spec(),
        examples,
    })
}

/// Padded mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N x n_max` token ids, padded with [`PAD`].
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Label>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pads every example to `pad_to` (or the longest example when `None`).
    pub fn from_examples(examples: &[&Example], pad_to: Option<usize>, max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let longest = examples.iter().map(|e| e.len()).max().unwrap_or(0);
        if longest == 0 {
            return Err(Error::Input("examples must be encoded before batching".into()));
        }
        let width = pad_to.unwrap_or(longest);
        if width < longest || width > max_len {
            return Err(Error::Input(format!(
                "padding width {width} must lie in {longest}..={max_len}"
            )));
        }
        let mut batch = Batch {
            ids: Vec::with_capacity(examples.len()),
            mask: Vec::with_capacity(examples.len()),
            labels: Vec::with_capacity(examples.len()),
            lengths: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            let mut ids = e.ids.clone();
            ids.resize(width, PAD);
            batch.ids.push(ids);
            batch.mask.push((0..width).map(|i| i < e.len()).collect());
            batch.labels.push(e.label);
            batch.lengths.push(e.len());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Seeded shuffle of `0..n`, split into batches of `batch_size`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), "shuffle");
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
