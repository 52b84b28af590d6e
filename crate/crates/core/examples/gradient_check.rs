//! Compares analytic gradients of the whole model against central
//! differences, one report per variant.

use hire::numerics::grad_check_params;
use hire::{Error, Model, ModelConfig};

fn main() -> hire::Result<()> {
    let mut config = ModelConfig::default();
    config.encoder.layers = 2;
    config.encoder.hidden = 8;
    config.encoder.ffn_dim = 16;
    let tokens = [1, 5, 9, 4];
    for variant in ["full", "no_hire", "no_fusion", "fusion_layers:0"] {
        let model = Model::new(
            ModelConfig {
                variant: variant.parse()?,
                ..config.clone()
            },
            3,
        )?;
        let report = grad_check_params(
            model.params(),
            |g| {
                let trace = model.forward(g, &tokens, &[true; 4], 0)?;
                Ok::<_, Error>(g.cross_entropy(trace.q, &[1])?)
            },
            |_, _| true,
            1e-4,
        )?;
        println!(
            "{variant:<16} {:>5} coordinates  max rel {:.2e}  max abs {:.2e}  {}",
            report.checked,
            report.max_rel_error,
            report.max_abs_error,
            if report.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
