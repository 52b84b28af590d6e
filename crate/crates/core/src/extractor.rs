//! Hidden-representation extractor.
//!
//! Every hidden state `H_i` is summarized by one shared two-layer
//! bidirectional GRU into a `4d` vector `U_i`. A linear scorer with ReLU
//! turns each summary into a non-negative importance `alpha_i`, a softmax
//! over layers turns the scores into weights `S`, and the complementary
//! representation is `A = sum_i S_i H_i`, which has the shape of the final
//! encoder output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::HiddenStates;
use crate::error::{Error, Result};
use crate::numerics::{stream, Graph, Initializer, ParamId, ParamSet, Tensor, Var};
use crate::recurrent::BiGruStack;

/// Number of stacked layers in the summarizing Bi-GRU.
pub const SUMMARIZER_LAYERS: usize = 2;

/// Initial scorer bias. At initialization `W . U_i` has the same sign for
/// every layer and example, so a zero bias leaves some seeds with every score
/// clamped by the ReLU and no gradient reaching the extractor. A shared
/// positive offset cancels in the softmax and keeps `S` uniform at start.
pub const SCORER_BIAS_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct HireParams {
    pub summarizer: BiGruStack,
    pub scorer: ScorerParams,
}

impl HireParams {
    pub fn init(params: &mut ParamSet, hidden: usize, init: &Initializer) -> Result<Self> {
        let summarizer = BiGruStack::init(params, "hire.summarizer", hidden, hidden, SUMMARIZER_LAYERS, init)?;
        let w = params.add("hire.scorer.w", init.normal("hire.scorer.w", &[4 * hidden], 0.02))?;
        let b = params.add("hire.scorer.b", Tensor::full(&[1], SCORER_BIAS_INIT))?;
        Ok(HireParams {
            summarizer,
            scorer: ScorerParams { w, b },
        })
    }

    pub fn bind(params: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(HireParams {
            summarizer: BiGruStack::bind(params, "hire.summarizer", SUMMARIZER_LAYERS)?,
            scorer: ScorerParams {
                w: get("hire.scorer.w")?,
                b: get("hire.scorer.b")?,
            },
        })
    }
}

/// Graph nodes of one extraction: summaries `u` (`(l+1) x 4d`), raw scores
/// `alpha` (`l+1`), weights `s` (`l+1`) and the complementary representation `a`.
#[derive(Clone, Copy, Debug)]
pub struct Importance {
    pub u: Var,
    pub alpha: Var,
    pub s: Var,
    pub a: Var,
}

/// Plain-value copy of an [`Importance`] for analysis and export.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDistribution {
    pub u: Tensor,
    pub alpha: Vec<f64>,
    pub s: Vec<f64>,
    pub a: Tensor,
}

impl Importance {
    pub fn snapshot(&self, g: &Graph<'_>) -> ImportanceDistribution {
        ImportanceDistribution {
            u: g.value(self.u).clone(),
            alpha: g.value(self.alpha).data().to_vec(),
            s: g.value(self.s).data().to_vec(),
            a: g.value(self.a).clone(),
        }
    }
}

/// Summarizes the first `length` rows of one hidden state into a `4d` vector.
pub fn summarize<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    state: Var,
    length: usize,
    summarizer: &BiGruStack,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let rows = g.value(state).rows();
    if length == 0 || length > rows {
        return Err(Error::Input(format!("summary length {length} outside 1..={rows}")));
    }
    let real = if length == rows { state } else { g.slice_rows(state, 0, length)? };
    let run = summarizer.run(g, real, dropout, rng)?;
    let finals = run.final_states(g)?;
    let width = g.value(finals).numel();
    Ok(g.reshape(finals, &[width])?)
}

/// `alpha_i = relu(W . U_i + b)` for every row of `u`.
pub fn score(g: &mut Graph<'_>, u: Var, scorer: &ScorerParams) -> Result<Var> {
    let w = g.param(scorer.w);
    let b = g.param(scorer.b);
    let width = g.value(w).numel();
    let (rows, cols) = (g.value(u).rows(), g.value(u).cols());
    if cols != width {
        return Err(Error::Input(format!("summary width {cols} does not match scorer width {width}")));
    }
    let w_col = g.reshape(w, &[width, 1])?;
    let raw = g.matmul(u, w_col)?;
    let raw = g.add_bias(raw, b)?;
    let alpha = g.relu(raw)?;
    Ok(g.reshape(alpha, &[rows])?)
}

/// Softmax over the layer axis.
pub fn normalize(g: &mut Graph<'_>, alpha: Var) -> Result<Var> {
    Ok(g.softmax(alpha, 0)?)
}

/// `A = sum_{i=0}^{l} S_i H_i`.
pub fn complement(g: &mut Graph<'_>, s: Var, hidden: &HiddenStates) -> Result<Var> {
    let k = g.value(s).numel();
    if k != hidden.states.len() {
        return Err(Error::Input(format!(
            "{k} importance weights for {} hidden states",
            hidden.states.len()
        )));
    }
    Ok(g.weighted_sum(s, &hidden.states)?)
}

/// Full extraction: summarize each state with the shared summarizer, score,
/// normalize and form the complementary representation.
pub fn extract<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    hidden: &HiddenStates,
    params: &HireParams,
    dropout: f64,
    rng: &mut R,
) -> Result<Importance> {
    let mut rows = Vec::with_capacity(hidden.states.len());
    for &state in &hidden.states {
        let summary = summarize(g, state, hidden.length, &params.summarizer, dropout, rng)?;
        let width = g.value(summary).numel();
        rows.push(g.reshape(summary, &[1, width])?);
    }
    let u = g.concat_rows(&rows)?;
    let alpha = score(g, u, &params.scorer)?;
    let s = normalize(g, alpha)?;
    let a = complement(g, s, hidden)?;
    Ok(Importance { u, alpha, s, a })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedKind {
    Mean,
    Random,
}

/// Which layers a fixed strategy covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "range", content = "k")]
pub enum LayerRange {
    All,
    First(usize),
    Last(usize),
}

impl LayerRange {
    fn bounds(self, layer_count: usize) -> Result<(usize, usize)> {
        let k = match self {
            LayerRange::All => layer_count,
            LayerRange::First(k) | LayerRange::Last(k) => k,
        };
        if k == 0 {
            return Err(Error::Config("layer range must select at least one layer".into()));
        }
        if k > layer_count {
            return Err(Error::Config(format!("layer range of {k} exceeds {layer_count} layers")));
        }
        Ok(match self {
            LayerRange::All => (0, layer_count),
            LayerRange::First(k) => (0, k),
            LayerRange::Last(k) => (layer_count - k, layer_count),
        })
    }
}

impl std::fmt::Display for LayerRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerRange::All => write!(f, "all"),
            LayerRange::First(k) => write!(f, "first_{k}"),
            LayerRange::Last(k) => write!(f, "last_{k}"),
        }
    }
}

/// Non-learned importance weights shared by every example.
///
/// `Mean` spreads weight uniformly over the selected layers. `Random` draws a
/// `uniform(0, 1)` score for each selected layer, gives the others negative
/// infinity, and applies a softmax across all layers.
pub fn fixed_strategy(kind: FixedKind, range: LayerRange, layer_count: usize, seed: u64) -> Result<Vec<f64>> {
    let (lo, hi) = range.bounds(layer_count)?;
    let mut s = vec![0.0; layer_count];
    match kind {
        FixedKind::Mean => {
            let w = 1.0 / (hi - lo) as f64;
            s[lo..hi].iter_mut().for_each(|v| *v = w);
        }
        FixedKind::Random => {
            let mut rng = stream(seed, "fixed_importance.random");
            let scores: Vec<f64> = (lo..hi).map(|_| rng.random::<f64>()).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|v| (v - max).exp()).sum();
            for (slot, v) in s[lo..hi].iter_mut().zip(&scores) {
                *slot = (v - max).exp() / total;
            }
        }
    }
    Ok(s)
}
