//! Small Transformer encoder exposing every hidden state.
//!
//! `states[0]` is the token-plus-position embedding and `states[j]` is the
//! residual stream after block `j`, so a model with `layers` blocks yields
//! `layers + 1` states. Padding is handled by masking attention keys; the
//! rows at padded positions are still computed but carry no information
//! into real positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Initializer, ParamId, ParamSet, Tensor, Var};

/// Placement of layer normalization inside each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// `x + f(norm(x))`
    Pre,
    /// `norm(x + f(x))`
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub norm_order: NormOrder,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 16,
            max_len: 32,
            dropout_rate: 0.1,
            norm_order: NormOrder::Pre,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("encoder.layers must be at least 1".into());
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return fail(format!("encoder.hidden must be even and positive, got {}", self.hidden));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "encoder.hidden ({}) must be divisible by encoder.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("encoder.ffn_dim, vocab_size and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("encoder.dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<BlockParams>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

impl EncoderParams {
    /// Registers encoder parameters under the `encoder.` prefix.
    ///
    /// Weights are drawn from `normal(0, 0.02)`, biases start at zero and
    /// layer-norm gains at one.
    pub fn init(params: &mut ParamSet, config: &EncoderConfig, init: &Initializer) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let normal = |params: &mut ParamSet, name: String, shape: &[usize]| {
            params.add(name.clone(), init.normal(&name, shape, INIT_STD))
        };
        let constant = |params: &mut ParamSet, name: String, n: usize, v: f64| params.add(name, Tensor::full(&[n], v));
        let token_embedding = normal(params, "encoder.token_embedding".into(), &[config.vocab_size, d])?;
        let position_embedding = normal(params, "encoder.position_embedding".into(), &[config.max_len, d])?;
        let mut blocks = Vec::with_capacity(config.layers);
        for j in 0..config.layers {
            let p = |s: &str| format!("encoder.layer{j}.{s}");
            let wq = normal(params, p("attn.wq"), &[d, d])?;
            let wk = normal(params, p("attn.wk"), &[d, d])?;
            let wv = normal(params, p("attn.wv"), &[d, d])?;
            let wo = normal(params, p("attn.wo"), &[d, d])?;
            let w1 = normal(params, p("ffn.w1"), &[d, config.ffn_dim])?;
            let w2 = normal(params, p("ffn.w2"), &[config.ffn_dim, d])?;
            let bq = constant(params, p("attn.bq"), d, 0.0)?;
            let bk = constant(params, p("attn.bk"), d, 0.0)?;
            let bv = constant(params, p("attn.bv"), d, 0.0)?;
            let bo = constant(params, p("attn.bo"), d, 0.0)?;
            let b1 = constant(params, p("ffn.b1"), config.ffn_dim, 0.0)?;
            let b2 = constant(params, p("ffn.b2"), d, 0.0)?;
            let ln1_b = constant(params, p("ln1.beta"), d, 0.0)?;
            let ln2_b = constant(params, p("ln2.beta"), d, 0.0)?;
            let ln1_g = constant(params, p("ln1.gamma"), d, 1.0)?;
            let ln2_g = constant(params, p("ln2.gamma"), d, 1.0)?;
            blocks.push(BlockParams {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        Ok(EncoderParams {
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    /// Looks the parameters up by name in an existing set.
    pub fn bind(params: &ParamSet, config: &EncoderConfig) -> Result<Self> {
        let get = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for j in 0..config.layers {
            let p = |s: &str| format!("encoder.layer{j}.{s}");
            blocks.push(BlockParams {
                ln1_g: get(p("ln1.gamma"))?,
                ln1_b: get(p("ln1.beta"))?,
                wq: get(p("attn.wq"))?,
                bq: get(p("attn.bq"))?,
                wk: get(p("attn.wk"))?,
                bk: get(p("attn.bk"))?,
                wv: get(p("attn.wv"))?,
                bv: get(p("attn.bv"))?,
                wo: get(p("attn.wo"))?,
                bo: get(p("attn.bo"))?,
                ln2_g: get(p("ln2.gamma"))?,
                ln2_b: get(p("ln2.beta"))?,
                w1: get(p("ffn.w1"))?,
                b1: get(p("ffn.b1"))?,
                w2: get(p("ffn.w2"))?,
                b2: get(p("ffn.b2"))?,
            });
        }
        Ok(EncoderParams {
            token_embedding: get("encoder.token_embedding".into())?,
            position_embedding: get("encoder.position_embedding".into())?,
            blocks,
        })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position_embedding
    }
}

/// All `layers + 1` hidden states of one example.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub states: Vec<Var>,
    /// Number of real (unpadded) tokens; rows at or past it are padding.
    pub length: usize,
}

impl HiddenStates {
    pub fn layer_count(&self) -> usize {
        self.states.len()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final-layer output, the same node as `hidden.states[layers]`.
    pub r: Var,
    pub hidden: HiddenStates,
    /// Pre-dropout attention weights, indexed `[layer][head]`, each `n x n`.
    pub attention: Vec<Vec<Var>>,
}

/// Token embedding plus learned absolute position embedding (`n x d`).
pub fn embed(g: &mut Graph<'_>, token_ids: &[usize], config: &EncoderConfig, params: &EncoderParams) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if token_ids.len() > config.max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_len {}",
            token_ids.len(),
            config.max_len
        )));
    }
    if let Some(bad) = token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    let table = g.param(params.token_embedding);
    let tokens = g.embedding(table, token_ids)?;
    let pos_table = g.param(params.position_embedding);
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let pos = g.embedding(pos_table, &positions)?;
    Ok(g.add(tokens, pos)?)
}

/// Number of real tokens in a mask of the form `[true.., false..]`.
pub fn mask_length(mask: &[bool]) -> Result<usize> {
    let length = mask.iter().take_while(|&&m| m).count();
    if length == 0 {
        return Err(Error::Input("mask has no unmasked position".into()));
    }
    if mask[length..].iter().any(|&m| m) {
        return Err(Error::Input("mask must mark a prefix of real tokens followed by padding".into()));
    }
    Ok(length)
}

fn self_attention<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    x: Var,
    keep: &[bool],
    config: &EncoderConfig,
    block: &BlockParams,
    rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let project = |g: &mut Graph<'_>, w: ParamId, b: ParamId| -> Result<Var> {
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.matmul(x, wv)?;
        Ok(g.add_bias(y, bv)?)
    };
    let q = project(g, block.wq, block.bq)?;
    let k = project(g, block.wk, block.bk)?;
    let v = project(g, block.wv, block.bv)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    let mut weights = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.masked_softmax(scores, keep)?;
        weights.push(probs);
        let probs = g.dropout(probs, config.dropout_rate, rng)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(block.wo);
    let bo = g.param(block.bo);
    let out = g.matmul(joined, wo)?;
    Ok((g.add_bias(out, bo)?, weights))
}

fn feed_forward(g: &mut Graph<'_>, x: Var, block: &BlockParams) -> Result<Var> {
    let w1 = g.param(block.w1);
    let b1 = g.param(block.b1);
    let w2 = g.param(block.w2);
    let b2 = g.param(block.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    Ok(g.add_bias(y, b2)?)
}

fn norm(g: &mut Graph<'_>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
    let gv = g.param(gamma);
    let bv = g.param(beta);
    Ok(g.layer_norm(x, gv, bv, LN_EPS)?)
}

/// Runs the encoder and returns the final output together with every hidden state.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    token_ids: &[usize],
    mask: &[bool],
    config: &EncoderConfig,
    params: &EncoderParams,
    rng: &mut R,
) -> Result<EncoderOutput> {
    if mask.len() != token_ids.len() {
        return Err(Error::Input(format!(
            "mask length {} differs from token count {}",
            mask.len(),
            token_ids.len()
        )));
    }
    let length = mask_length(mask)?;
    let h0 = embed(g, token_ids, config, params)?;
    let mut states = vec![h0];
    let mut attention = Vec::with_capacity(config.layers);
    let mut x = g.dropout(h0, config.dropout_rate, rng)?;
    for block in &params.blocks {
        x = match config.norm_order {
            NormOrder::Pre => {
                let n1 = norm(g, x, block.ln1_g, block.ln1_b)?;
                let (a, w) = self_attention(g, n1, mask, config, block, rng)?;
                attention.push(w);
                let a = g.dropout(a, config.dropout_rate, rng)?;
                let x1 = g.add(x, a)?;
                let n2 = norm(g, x1, block.ln2_g, block.ln2_b)?;
                let f = feed_forward(g, n2, block)?;
                let f = g.dropout(f, config.dropout_rate, rng)?;
                g.add(x1, f)?
            }
            NormOrder::Post => {
                let (a, w) = self_attention(g, x, mask, config, block, rng)?;
                attention.push(w);
                let a = g.dropout(a, config.dropout_rate, rng)?;
                let s1 = g.add(x, a)?;
                let x1 = norm(g, s1, block.ln1_g, block.ln1_b)?;
                let f = feed_forward(g, x1, block)?;
                let f = g.dropout(f, config.dropout_rate, rng)?;
                let s2 = g.add(x1, f)?;
                norm(g, s2, block.ln2_g, block.ln2_b)?
            }
        };
        states.push(x);
    }
    let r = *states.last().expect("at least one state");
    Ok(EncoderOutput {
        r,
        hidden: HiddenStates { states, length },
        attention,
    })
}
