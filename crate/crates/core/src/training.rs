//! Losses, optimizer, schedule, clipping and the training loop.

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Batch, Dataset, Example, Label, MetricKind};
use crate::error::{Error, Result};
use crate::heads::argmax;
use crate::metrics::{self, MetricReport, Predictions};
use crate::model::Model;
use crate::numerics::kernels::log_sum_exp;
use crate::numerics::{stable_hash, Gradients, Graph, Mode, NumericsError, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_peak: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            warmup_ratio: 0.06,
            clip_norm: 1.0,
            weight_decay: 0.1,
            batch_size: 32,
            max_epochs: 20,
            early_stop_patience: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail("optimizer.warmup_ratio must lie in (0, 1)");
        }
        if self.clip_norm <= 0.0 {
            return fail("optimizer.clip_norm must be positive");
        }
        if self.lr_peak <= 0.0 || !self.lr_peak.is_finite() {
            return fail("optimizer.lr_peak must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("optimizer betas must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return fail("optimizer.epsilon must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return fail("optimizer.batch_size, max_epochs and early_stop_patience must be positive");
        }
        Ok(())
    }
}

/// Mean cross-entropy of class probabilities, `-(1/N) sum_i log p[i][y_i]`.
pub fn cross_entropy_from_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Input("cross-entropy needs one label per probability row".into()));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Input(format!("label {y} out of range for {} classes", p.len())))?;
        total -= py.ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean cross-entropy computed from logits through log-sum-exp, so a zero
/// probability never produces an infinite log.
pub fn cross_entropy_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Input("cross-entropy needs one label per logit row".into()));
    }
    let mut total = 0.0;
    for (q, &y) in logits.iter().zip(labels) {
        if y >= q.len() {
            return Err(Error::Input(format!("label {y} out of range for {} classes", q.len())));
        }
        total += log_sum_exp(q) - q[y];
    }
    Ok(total / logits.len() as f64)
}

/// `(1/N) sum (Q_i - y_i)^2`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Input("mean squared error of an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Input(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / pred.len() as f64)
}

/// Rescales `grads` in place so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Numerics(NumericsError::NonFinite { kernel: "clip_gradients" }));
    }
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// Linear warmup to `lr_peak` over `round(warmup_ratio * total_steps)` steps,
/// then linear decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, config: &OptimizerConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Input(format!("step {step} past the schedule end {total_steps}")));
    }
    let warmup = warmup_steps(total_steps, config);
    if step >= total_steps {
        return Ok(0.0);
    }
    if step < warmup {
        return Ok(config.lr_peak * step as f64 / warmup as f64);
    }
    Ok(config.lr_peak * (total_steps - step) as f64 / (total_steps - warmup) as f64)
}

pub fn warmup_steps(total_steps: usize, config: &OptimizerConfig) -> usize {
    ((config.warmup_ratio * total_steps as f64).round() as usize).max(1)
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// The step counter is incremented first. Each parameter is shrunk by
/// `lr * weight_decay * param`, then moved by `lr * m_hat / (sqrt(v_hat) + eps)`.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, lr: f64, config: &OptimizerConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let grad = grads.get(id);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = params.get_mut(id).data_mut();
        for (j, ((pj, mj), vj)) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).enumerate() {
            let g = grad.map_or(0.0, |g| g.data()[j]);
            *mj = config.beta1 * *mj + (1.0 - config.beta1) * g;
            *vj = config.beta2 * *vj + (1.0 - config.beta2) * g * g;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= lr * config.weight_decay * *pj;
            *pj -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            return StopDecision::Improved;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps: usize,
}

pub fn metric_key(kind: MetricKind) -> &'static str {
    match kind {
        MetricKind::Matthews => "matthews",
        MetricKind::Accuracy => "accuracy",
        MetricKind::F1 => "f1",
        MetricKind::Pearson => "pearson",
    }
}

/// Dropout seed of one example at one optimizer step.
pub fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed ^ stable_hash(&format!("step{step}/example{index}"))
}

fn example_loss(g: &mut Graph<'_>, q: crate::numerics::Var, label: Label) -> Result<crate::numerics::Var> {
    Ok(match label {
        Label::Class(c) => g.cross_entropy(q, &[c])?,
        Label::Value(y) => g.mse(q, &[y])?,
    })
}

fn as_divergence(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerics(NumericsError::NonFinite { .. }) => Error::Divergence {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Mean loss and gradients over one batch, with dropout active.
pub fn batch_gradients(model: &Model, batch: &Batch, seed: u64, step: usize) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros_like(model.params());
    let mut loss_sum = 0.0;
    for i in 0..batch.len() {
        let mut g = Graph::with_params(model.params(), Mode::Train);
        let trace = model.forward(&mut g, &batch.ids[i], &batch.mask[i], example_seed(seed, step, i))?;
        let loss = example_loss(&mut g, trace.q, batch.labels[i])?;
        loss_sum += g.value(loss).item();
        g.backward(loss)?;
        total.accumulate(&g.param_grads());
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss_sum / n, total))
}

/// Eval-mode outputs for every example: head outputs `Q` plus mean loss.
pub fn predict(model: &Model, examples: &[&Example], batch_size: usize, max_len: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut outputs = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk, None, max_len)?;
        for i in 0..batch.len() {
            let mut g = Graph::with_params(model.params(), Mode::Eval);
            let trace = model.forward(&mut g, &batch.ids[i], &batch.mask[i], 0)?;
            let loss = example_loss(&mut g, trace.q, batch.labels[i])?;
            loss_sum += g.value(loss).item();
            outputs.push(g.value(trace.q).data().to_vec());
        }
    }
    Ok((outputs, loss_sum / examples.len().max(1) as f64))
}

/// Evaluates a dataset and returns its metric report.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let (outputs, _) = predict(model, &refs, batch_size, model.config().encoder.max_len)?;
    let predictions = if dataset.spec.is_regression() {
        Predictions::Values(outputs.iter().map(|q| q[0]).collect())
    } else {
        Predictions::Classes(outputs.iter().map(|q| argmax(q)).collect())
    };
    let labels: Vec<Label> = dataset.examples.iter().map(|e| e.label).collect();
    metrics::metrics(&predictions, &labels, &dataset.spec)
}

/// Epoch loop: seeded shuffle, per-batch gradients, clipping, Adam and the
/// warmup/decay schedule, with a dev evaluation after every epoch. Stops
/// after `early_stop_patience` epochs without improvement of the task's
/// primary metric and leaves the best-dev parameters in `model`.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &OptimizerConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Input("training and dev splits must be non-empty".into()));
    }
    if train_set.spec.outputs() != model.config().outputs {
        return Err(Error::Config(format!(
            "task {} needs {} outputs but the model head has {}",
            train_set.spec.name,
            train_set.spec.outputs(),
            model.config().outputs
        )));
    }
    let max_len = model.config().encoder.max_len;
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.max_epochs;
    let key = metric_key(dev_set.spec.primary_metric);

    let mut state = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best_params = model.params().clone();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for indices in batch_order(train_set.len(), config.batch_size, seed, epoch) {
            let examples: Vec<&Example> = indices.iter().map(|&i| &train_set.examples[i]).collect();
            let batch = Batch::from_examples(&examples, None, max_len)?;
            let (loss, mut grads) =
                batch_gradients(model, &batch, seed, step).map_err(|e| as_divergence(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            clip_gradients(&mut grads, config.clip_norm).map_err(|e| as_divergence(e, epoch, step))?;
            step += 1;
            let lr = lr_schedule(step, total_steps, config)?;
            adam_step(model.params_mut(), &grads, &mut state, lr, config);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let dev = evaluate(model, dev_set, config.batch_size).map_err(|e| as_divergence(e, epoch, step))?;
        let metric = dev
            .get(key)
            .ok_or_else(|| Error::Config(format!("dev report lacks primary metric {key}")))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            dev,
        };
        on_epoch(&record);
        epochs.push(record);
        match stopper.update(epoch, metric) {
            StopDecision::Improved => best_params = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best.unwrap_or(f64::NAN),
        steps: step,
    })
}
