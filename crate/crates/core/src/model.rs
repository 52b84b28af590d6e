//! Model assembly: encoder, extractor, fusion network and output head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::extractor::{self, FixedKind, HireParams, Importance, LayerRange};
use crate::fusion::{self, FusionParams};
use crate::heads::{self, HeadParams};
use crate::numerics::{stream, Graph, Initializer, ParamSet, Tensor, Var};

/// Model variants used for the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    /// Dynamic extractor and recurrent fusion with the configured depth.
    Full,
    /// No extractor; the fusion network combines `R` with itself.
    NoHire,
    /// No fusion network; the head reads the first row of `A`.
    NoFusion,
    /// A non-learned importance distribution replaces the dynamic one.
    FixedImportance { strategy: FixedKind, range: LayerRange },
    /// Full model with an explicit fusion depth (0 selects the affine map).
    FusionLayers { layers: usize },
}

impl Variant {
    pub fn has_dynamic_hire(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoFusion | Variant::FusionLayers { .. })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::NoHire => write!(f, "no_hire"),
            Variant::NoFusion => write!(f, "no_fusion"),
            Variant::FixedImportance { strategy, range } => {
                let kind = match strategy {
                    FixedKind::Mean => "mean",
                    FixedKind::Random => "random",
                };
                write!(f, "fixed:{kind}:{range}")
            }
            Variant::FusionLayers { layers } => write!(f, "fusion_layers:{layers}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Parses `full`, `no_hire`, `no_fusion`, `fixed:<mean|random>:<all|first_k|last_k>`
    /// and `fusion_layers:<g>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown variant {s:?}; expected full, no_hire, no_fusion, fixed:<mean|random>:<all|first_k|last_k> or fusion_layers:<0-3>"
            ))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["full"] => Ok(Variant::Full),
            ["no_hire"] => Ok(Variant::NoHire),
            ["no_fusion"] => Ok(Variant::NoFusion),
            ["fusion_layers", g] => Ok(Variant::FusionLayers {
                layers: g.parse().map_err(|_| bad())?,
            }),
            ["fixed", kind, range] => {
                let strategy = match *kind {
                    "mean" => FixedKind::Mean,
                    "random" => FixedKind::Random,
                    _ => return Err(bad()),
                };
                let range = if *range == "all" {
                    LayerRange::All
                } else if let Some(k) = range.strip_prefix("first_") {
                    LayerRange::First(k.parse().map_err(|_| bad())?)
                } else if let Some(k) = range.strip_prefix("last_") {
                    LayerRange::Last(k.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                };
                Ok(Variant::FixedImportance { strategy, range })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Stacked Bi-GRU layers in the fusion network (0..=3).
    pub fusion_layers: usize,
    /// Dropout between stacked GRU layers of the extractor and fusion network.
    pub gru_dropout: f64,
    pub variant: Variant,
    /// Number of head outputs `m` (1 for regression).
    pub outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion_layers: 2,
            gru_dropout: 0.1,
            variant: Variant::Full,
            outputs: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.gru_dropout) {
            return Err(Error::Config(format!("gru_dropout {} outside [0, 1)", self.gru_dropout)));
        }
        if self.outputs == 0 {
            return Err(Error::Config("outputs must be at least 1".into()));
        }
        if self.effective_fusion_layers() > fusion::MAX_FUSION_LAYERS {
            return Err(Error::Config(format!(
                "fusion layer count {} outside 0..={}",
                self.effective_fusion_layers(),
                fusion::MAX_FUSION_LAYERS
            )));
        }
        Ok(())
    }

    pub fn effective_fusion_layers(&self) -> usize {
        match self.variant {
            Variant::FusionLayers { layers } => layers,
            _ => self.fusion_layers,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.encoder.layers + 1
    }
}

/// How the complementary representation `A` is produced.
#[derive(Clone, Debug)]
pub enum Extraction {
    Dynamic(HireParams),
    /// The same weights for every example.
    Fixed(Vec<f64>),
    /// `A := R`.
    Identity,
    /// No `A` at all; the fusion network sees `[R; R; R + R; R * R]`.
    Absent,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: ParamSet,
    encoder: EncoderParams,
    extraction: Extraction,
    fusion: Option<FusionParams>,
    head: HeadParams,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub encoder: EncoderOutput,
    /// Dynamic extractor nodes, when the variant has one.
    pub importance: Option<Importance>,
    /// Importance weights actually used (dynamic or fixed).
    pub s: Option<Var>,
    pub a: Option<Var>,
    pub m: Option<Var>,
    pub f: Option<Var>,
    pub c: Var,
    pub q: Var,
}

impl Model {
    /// Builds a freshly initialized model. Parameters are seeded by name, so
    /// parameters shared between variants start identical for the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Initializer::new(seed);
        let d = config.encoder.hidden;
        let mut params = ParamSet::new();
        let encoder = EncoderParams::init(&mut params, &config.encoder, &init)?;
        let extraction = match config.variant {
            Variant::Full | Variant::NoFusion | Variant::FusionLayers { .. } => {
                Extraction::Dynamic(HireParams::init(&mut params, d, &init)?)
            }
            Variant::FixedImportance { strategy, range } => {
                Extraction::Fixed(extractor::fixed_strategy(strategy, range, config.layer_count(), seed)?)
            }
            Variant::NoHire => Extraction::Absent,
        };
        let (fusion, head_width) = if config.variant == Variant::NoFusion {
            (None, d)
        } else {
            let layers = config.effective_fusion_layers();
            (Some(FusionParams::init(&mut params, d, layers, &init)?), 2 * d)
        };
        let head = HeadParams::init(&mut params, head_width, d, config.outputs, &init)?;
        Ok(Model {
            config,
            seed,
            params,
            encoder,
            extraction,
            fusion,
            head,
        })
    }

    /// Rebuilds a model around an existing parameter set (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, seed: u64, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::bind(&params, &config.encoder)?;
        let extraction = match config.variant {
            Variant::Full | Variant::NoFusion | Variant::FusionLayers { .. } => {
                Extraction::Dynamic(HireParams::bind(&params)?)
            }
            Variant::FixedImportance { strategy, range } => {
                Extraction::Fixed(extractor::fixed_strategy(strategy, range, config.layer_count(), seed)?)
            }
            Variant::NoHire => Extraction::Absent,
        };
        let fusion = if config.variant == Variant::NoFusion {
            None
        } else {
            Some(FusionParams::bind(&params, config.effective_fusion_layers())?)
        };
        let head = HeadParams::bind(&params)?;
        let expected = if fusion.is_some() { 2 * config.encoder.hidden } else { config.encoder.hidden };
        if head.in_width != expected || head.outputs != config.outputs {
            return Err(Error::Config(format!(
                "head shape {}x{} does not match the configuration ({expected}x{})",
                head.in_width, head.outputs, config.outputs
            )));
        }
        Ok(Model {
            config,
            seed,
            params,
            encoder,
            extraction,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn extraction(&self) -> &Extraction {
        &self.extraction
    }

    /// Replaces how `A` is produced, keeping every other parameter.
    pub fn set_extraction(&mut self, extraction: Extraction) -> Result<()> {
        if let Extraction::Fixed(s) = &extraction {
            if s.len() != self.config.layer_count() {
                return Err(Error::Config(format!(
                    "{} fixed weights for {} layers",
                    s.len(),
                    self.config.layer_count()
                )));
            }
        }
        if matches!(extraction, Extraction::Absent) && self.fusion.is_none() {
            return Err(Error::Config("a model without fusion needs a representation A".into()));
        }
        self.extraction = extraction;
        Ok(())
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    /// Forward pass for one example. `example_seed` drives dropout; in eval
    /// mode it has no effect.
    pub fn forward(&self, g: &mut Graph<'_>, token_ids: &[usize], mask: &[bool], example_seed: u64) -> Result<Trace> {
        let mut enc_rng = stream(example_seed, "encoder");
        let mut hire_rng = stream(example_seed, "hire");
        let mut fusion_rng = stream(example_seed, "fusion");
        let enc = encoder::encode(g, token_ids, mask, &self.config.encoder, &self.encoder, &mut enc_rng)?;
        let r = enc.r;
        let length = enc.hidden.length;
        let dropout = self.config.gru_dropout;

        let (importance, s, a) = match &self.extraction {
            Extraction::Dynamic(hire) => {
                let imp = extractor::extract(g, &enc.hidden, hire, dropout, &mut hire_rng)?;
                (Some(imp), Some(imp.s), Some(imp.a))
            }
            Extraction::Fixed(weights) => {
                let s = g.constant(Tensor::vector(weights.clone()));
                let a = extractor::complement(g, s, &enc.hidden)?;
                (None, Some(s), Some(a))
            }
            Extraction::Identity => (None, None, Some(r)),
            Extraction::Absent => (None, None, None),
        };

        let (m, f, c) = match &self.fusion {
            Some(fp) => {
                let m = match a {
                    Some(a) => fusion::combine(g, r, a)?,
                    None => fusion::self_combine(g, r)?,
                };
                let f = fusion::fuse(g, m, length, fp, dropout, &mut fusion_rng)?;
                let c = heads::aggregate(g, f)?;
                (Some(m), Some(f), c)
            }
            None => {
                let a = a.expect("validated: fusion-free models carry A");
                (None, None, heads::aggregate(g, a)?)
            }
        };
        let q = heads::head_forward(g, c, &self.head)?;
        Ok(Trace {
            encoder: enc,
            importance,
            s,
            a,
            m,
            f,
            c,
            q,
        })
    }
}
