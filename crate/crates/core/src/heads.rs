//! Task output layer: first-row aggregation followed by a two-layer FFN.

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_lane;
use crate::numerics::{Graph, Initializer, ParamId, ParamSet, Tensor, Var};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_width: usize,
    pub outputs: usize,
}

impl HeadParams {
    /// `W_1: in_width x d`, `W_2: d x outputs`.
    pub fn init(params: &mut ParamSet, in_width: usize, hidden: usize, outputs: usize, init: &Initializer) -> Result<Self> {
        if outputs == 0 {
            return Err(Error::Config("head needs at least one output".into()));
        }
        Ok(HeadParams {
            w1: params.add("head.w1", init.normal("head.w1", &[in_width, hidden], 0.02))?,
            b1: params.add("head.b1", Tensor::zeros(&[hidden]))?,
            w2: params.add("head.w2", init.normal("head.w2", &[hidden, outputs], 0.02))?,
            b2: params.add("head.b2", Tensor::zeros(&[outputs]))?,
            in_width,
            outputs,
        })
    }

    pub fn bind(params: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let w1 = get("head.w1")?;
        let w2 = get("head.w2")?;
        Ok(HeadParams {
            w1,
            b1: get("head.b1")?,
            w2,
            b2: get("head.b2")?,
            in_width: params.get(w1).rows(),
            outputs: params.get(w2).cols(),
        })
    }
}

/// Row 0 of `f`, the position of the sequence-start token.
pub fn aggregate(g: &mut Graph<'_>, f: Var) -> Result<Var> {
    let width = g.value(f).cols();
    let first = g.slice_rows(f, 0, 1)?;
    Ok(g.reshape(first, &[width])?)
}

/// `Q = W_2^T tanh(W_1^T C + b_1) + b_2`.
pub fn head_forward(g: &mut Graph<'_>, c: Var, params: &HeadParams) -> Result<Var> {
    let width = g.value(c).numel();
    if width != params.in_width {
        return Err(Error::Input(format!(
            "head expects a {}-wide input, got {width}",
            params.in_width
        )));
    }
    let row = g.reshape(c, &[1, width])?;
    let w1 = g.param(params.w1);
    let b1 = g.param(params.b1);
    let w2 = g.param(params.w2);
    let b2 = g.param(params.b2);
    let h = g.matmul(row, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.tanh(h)?;
    let q = g.matmul(h, w2)?;
    let q = g.add_bias(q, b2)?;
    Ok(g.reshape(q, &[params.outputs])?)
}

/// Class probabilities from logits; undefined for a single (regression) output.
pub fn predict_proba(q: &[f64]) -> Result<Vec<f64>> {
    if q.len() < 2 {
        return Err(Error::Input("probabilities need at least two logits; regression heads have one".into()));
    }
    let mut p = vec![0.0; q.len()];
    softmax_lane(q, None, &mut p);
    Ok(p)
}

/// Index of the largest entry (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
