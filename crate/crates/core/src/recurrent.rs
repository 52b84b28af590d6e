//! Stacked bidirectional GRU shared by the extractor and the fusion network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, GruVars, Initializer, ParamId, ParamSet, Var};

#[derive(Clone, Copy, Debug)]
struct DirectionIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl DirectionIds {
    fn vars(&self, g: &mut Graph<'_>) -> GruVars {
        GruVars {
            w_ih: g.param(self.w_ih),
            w_hh: g.param(self.w_hh),
            b_ih: g.param(self.b_ih),
            b_hh: g.param(self.b_hh),
        }
    }
}

/// Parameters of `layers` stacked bidirectional GRU layers with `hidden`
/// units per direction. Layer 0 reads `input`-wide rows; deeper layers read
/// the `2 * hidden` forward/backward concatenation of the layer below.
#[derive(Clone, Debug)]
pub struct BiGruStack {
    input: usize,
    hidden: usize,
    layers: Vec<[DirectionIds; 2]>,
}

/// Per-layer `(forward, backward)` output sequences of one run.
#[derive(Clone, Debug)]
pub struct BiGruRun {
    pub layers: Vec<(Var, Var)>,
    pub steps: usize,
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

fn names(prefix: &str, layer: usize, dir: &str) -> [String; 4] {
    ["w_ih", "w_hh", "b_ih", "b_hh"].map(|s| format!("{prefix}.l{layer}.{dir}.{s}"))
}

impl BiGruStack {
    /// Registers parameters under `prefix`, drawn from `uniform(-1/sqrt(hidden), 1/sqrt(hidden))`.
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        init: &Initializer,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let width = if l == 0 { input } else { 2 * hidden };
            let mut pair = Vec::with_capacity(2);
            for dir in DIRECTIONS {
                let [wi, wh, bi, bh] = names(prefix, l, dir);
                pair.push(DirectionIds {
                    w_ih: params.add(wi.clone(), init.uniform(&wi, &[width, 3 * hidden], bound))?,
                    w_hh: params.add(wh.clone(), init.uniform(&wh, &[hidden, 3 * hidden], bound))?,
                    b_ih: params.add(bi.clone(), init.uniform(&bi, &[3 * hidden], bound))?,
                    b_hh: params.add(bh.clone(), init.uniform(&bh, &[3 * hidden], bound))?,
                });
            }
            out.push([pair[0], pair[1]]);
        }
        Ok(BiGruStack {
            input,
            hidden,
            layers: out,
        })
    }

    pub fn bind(params: &ParamSet, prefix: &str, layers: usize) -> Result<Self> {
        let get = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut pair = Vec::with_capacity(2);
            for dir in DIRECTIONS {
                let [wi, wh, bi, bh] = names(prefix, l, dir);
                pair.push(DirectionIds {
                    w_ih: get(&wi)?,
                    w_hh: get(&wh)?,
                    b_ih: get(&bi)?,
                    b_hh: get(&bh)?,
                });
            }
            out.push([pair[0], pair[1]]);
        }
        let first = out
            .first()
            .ok_or_else(|| Error::Config(format!("{prefix}: a GRU stack needs at least one layer")))?;
        let input = params.get(first[0].w_ih).rows();
        let hidden = params.get(first[0].w_hh).rows();
        Ok(BiGruStack {
            input,
            hidden,
            layers: out,
        })
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Runs every layer over all rows of `x`. Dropout is applied to the
    /// output of each layer before it feeds the next one.
    pub fn run<R: Rng + ?Sized>(&self, g: &mut Graph<'_>, x: Var, dropout: f64, rng: &mut R) -> Result<BiGruRun> {
        let steps = g.value(x).rows();
        let mut input = x;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, [fwd, bwd]) in self.layers.iter().enumerate() {
            if l > 0 {
                input = g.dropout(input, dropout, rng)?;
            }
            let fw = fwd.vars(g);
            let bw = bwd.vars(g);
            let f = g.gru_scan(input, fw, false)?;
            let b = g.gru_scan(input, bw, true)?;
            layers.push((f, b));
            input = g.concat_cols(&[f, b])?;
        }
        Ok(BiGruRun { layers, steps })
    }
}

impl BiGruRun {
    /// Final state of each layer and direction, concatenated layer-major with
    /// forward before backward (`1 x 2 * layers * hidden`).
    pub fn final_states(&self, g: &mut Graph<'_>) -> Result<Var> {
        let mut parts = Vec::with_capacity(2 * self.layers.len());
        for &(f, b) in &self.layers {
            parts.push(g.slice_rows(f, self.steps - 1, self.steps)?);
            // the backward scan ends at position 0
            parts.push(g.slice_rows(b, 0, 1)?);
        }
        Ok(g.concat_cols(&parts)?)
    }

    /// Forward and backward outputs of the top layer, concatenated per position.
    pub fn top_outputs(&self, g: &mut Graph<'_>) -> Result<Var> {
        let &(f, b) = self.layers.last().expect("at least one layer");
        Ok(g.concat_cols(&[f, b])?)
    }
}
