#![allow(dead_code)]

use hire::encoder::{EncoderConfig, NormOrder};
use hire::model::{ModelConfig, Variant};
use hire::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn encoder_config(layers: usize, hidden: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        hidden,
        heads,
        ffn_dim: 2 * hidden,
        vocab_size: 12,
        max_len: 16,
        dropout_rate: 0.1,
        norm_order: NormOrder::Pre,
    }
}

/// The small configuration used for full-pipeline gradient checks.
pub fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        encoder: encoder_config(2, 8, 2),
        fusion_layers: 2,
        gru_dropout: 0.1,
        variant,
        outputs: 2,
    }
}

pub fn ids(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    std::iter::once(1).chain((1..n).map(|_| r.random_range(4..12))).collect()
}

pub fn direct_matthews(pred: &[usize], gold: &[usize]) -> f64 {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&p, &y) in pred.iter().zip(gold) {
        match (p, y) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            _ => fn_ += 1.0,
        }
    }
    (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()
}

pub fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}
