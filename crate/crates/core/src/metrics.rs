//! Accuracy, binary F1, Matthews correlation, Pearson and Spearman.
//!
//! A metric whose denominator vanishes (constant vectors, an empty confusion
//! row or column) is reported as 0 and flagged as degenerate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Label, TaskKind, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub degenerate: bool,
}

impl MetricValue {
    fn ok(value: f64) -> Self {
        MetricValue {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        MetricValue {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// Binary confusion counts with class 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(pred: &[usize], gold: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in pred.iter().zip(gold) {
            match (p == 1, y == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> MetricValue {
    if pred.is_empty() {
        return MetricValue::degenerate();
    }
    let hits = pred.iter().zip(gold).filter(|(p, y)| p == y).count();
    MetricValue::ok(hits as f64 / pred.len() as f64)
}

pub fn f1(pred: &[usize], gold: &[usize]) -> MetricValue {
    let c = Confusion::from_predictions(pred, gold);
    if c.tp + c.fp == 0 || c.tp + c.fn_ == 0 {
        return MetricValue::degenerate();
    }
    let tp = c.tp as f64;
    MetricValue::ok(2.0 * tp / (2.0 * tp + c.fp as f64 + c.fn_ as f64))
}

pub fn matthews(pred: &[usize], gold: &[usize]) -> MetricValue {
    let c = Confusion::from_predictions(pred, gold);
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return MetricValue::degenerate();
    }
    MetricValue::ok((tp * tn - fp * fn_) / denom.sqrt())
}

pub fn pearson(x: &[f64], y: &[f64]) -> MetricValue {
    let n = x.len() as f64;
    if x.len() < 2 {
        return MetricValue::degenerate();
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return MetricValue::degenerate();
    }
    MetricValue::ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> MetricValue {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Classes(v) => v.len(),
            Predictions::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat metric-name to value map plus the names of degenerate entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub degenerate: BTreeSet<String>,
}

impl MetricReport {
    fn put(&mut self, name: &str, m: MetricValue) {
        self.values.insert(name.to_string(), m.value);
        if m.degenerate {
            self.degenerate.insert(name.to_string());
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("metric report serializes")
    }

    /// Two-line CSV: header of metric names, then values.
    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self.values.keys().map(String::as_str).collect();
        let vals: Vec<String> = self.values.values().map(|v| format!("{v}")).collect();
        format!("{}\n{}\n", names.join(","), vals.join(","))
    }
}

/// Computes every metric appropriate for the task kind.
pub fn metrics(predictions: &Predictions, labels: &[Label], spec: &TaskSpec) -> Result<MetricReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut report = MetricReport::default();
    match (spec.kind, predictions) {
        (TaskKind::Classification { labels: m }, Predictions::Classes(pred)) => {
            let gold = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    Label::Value(_) => Err(Error::Input("real-valued label in a classification task".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            report.put("accuracy", accuracy(pred, &gold));
            if m == 2 {
                report.put("f1", f1(pred, &gold));
                report.put("matthews", matthews(pred, &gold));
            }
        }
        (TaskKind::Regression, Predictions::Values(pred)) => {
            let gold: Vec<f64> = labels.iter().map(Label::as_f64).collect();
            report.put("pearson", pearson(pred, &gold));
            report.put("spearman", spearman(pred, &gold));
        }
        _ => return Err(Error::Input("prediction type does not match the task kind".into())),
    }
    Ok(report)
}
