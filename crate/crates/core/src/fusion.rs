//! Fusion of the final encoder output `R` with the complementary representation `A`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Initializer, ParamId, ParamSet, Tensor, Var};
use crate::recurrent::BiGruStack;

/// Largest stacked GRU depth accepted by the fusion network.
pub const MAX_FUSION_LAYERS: usize = 3;

#[derive(Clone, Debug)]
pub enum FusionParams {
    /// `g >= 1` stacked bidirectional GRU layers, `d` units per direction.
    Recurrent(BiGruStack),
    /// `g = 0`: per-position affine map from `4d` to `2d`.
    Affine { w: ParamId, b: ParamId },
}

impl FusionParams {
    pub fn init(params: &mut ParamSet, hidden: usize, layers: usize, init: &Initializer) -> Result<Self> {
        check_layers(layers)?;
        if layers == 0 {
            let w = params.add("fusion.affine.w", init.normal("fusion.affine.w", &[4 * hidden, 2 * hidden], 0.02))?;
            let b = params.add("fusion.affine.b", Tensor::zeros(&[2 * hidden]))?;
            return Ok(FusionParams::Affine { w, b });
        }
        Ok(FusionParams::Recurrent(BiGruStack::init(
            params,
            "fusion.gru",
            4 * hidden,
            hidden,
            layers,
            init,
        )?))
    }

    pub fn bind(params: &ParamSet, layers: usize) -> Result<Self> {
        check_layers(layers)?;
        if layers == 0 {
            let get = |name: &str| {
                params
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
            };
            return Ok(FusionParams::Affine {
                w: get("fusion.affine.w")?,
                b: get("fusion.affine.b")?,
            });
        }
        Ok(FusionParams::Recurrent(BiGruStack::bind(params, "fusion.gru", layers)?))
    }

    pub fn layer_count(&self) -> usize {
        match self {
            FusionParams::Recurrent(stack) => stack.layer_count(),
            FusionParams::Affine { .. } => 0,
        }
    }
}

fn check_layers(layers: usize) -> Result<()> {
    if layers > MAX_FUSION_LAYERS {
        return Err(Error::Config(format!(
            "fusion layer count {layers} outside 0..={MAX_FUSION_LAYERS}"
        )));
    }
    Ok(())
}

/// `M = [R; A; R + A; R * A]` along the last dimension.
pub fn combine(g: &mut Graph<'_>, r: Var, a: Var) -> Result<Var> {
    if g.shape(r) != g.shape(a) {
        return Err(Error::Input(format!(
            "cannot combine R {:?} with A {:?}",
            g.shape(r),
            g.shape(a)
        )));
    }
    let sum = g.add(r, a)?;
    let prod = g.mul(r, a)?;
    Ok(g.concat_cols(&[r, a, sum, prod])?)
}

/// `M = [R; R; R + R; R * R]`, the combination used when no extractor is present.
pub fn self_combine(g: &mut Graph<'_>, r: Var) -> Result<Var> {
    combine(g, r, r)
}

/// Fuses the first `length` rows of `m` into `F` (`n x 2d`). Rows at or past
/// `length` are zero.
pub fn fuse<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    m: Var,
    length: usize,
    params: &FusionParams,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let rows = g.value(m).rows();
    if length == 0 || length > rows {
        return Err(Error::Input(format!("fusion length {length} outside 1..={rows}")));
    }
    let real = if length == rows { m } else { g.slice_rows(m, 0, length)? };
    let fused = match params {
        FusionParams::Recurrent(stack) => {
            if g.value(m).cols() != stack.input() {
                return Err(Error::Input(format!(
                    "fusion input width {} does not match {}",
                    g.value(m).cols(),
                    stack.input()
                )));
            }
            let run = stack.run(g, real, dropout, rng)?;
            run.top_outputs(g)?
        }
        FusionParams::Affine { w, b } => {
            let wv = g.param(*w);
            let bv = g.param(*b);
            let y = g.matmul(real, wv)?;
            g.add_bias(y, bv)?
        }
    };
    if length == rows {
        return Ok(fused);
    }
    let width = g.value(fused).cols();
    let pad = g.constant(Tensor::zeros(&[rows - length, width]));
    Ok(g.concat_rows(&[fused, pad])?)
}
