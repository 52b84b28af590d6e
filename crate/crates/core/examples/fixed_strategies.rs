//! Prints the non-learned importance distributions used as baselines.

use hire::extractor::{fixed_strategy, FixedKind, LayerRange};

fn main() -> hire::Result<()> {
    let layers = 25;
    for (kind, range) in [
        (FixedKind::Mean, LayerRange::All),
        (FixedKind::Mean, LayerRange::Last(6)),
        (FixedKind::Mean, LayerRange::First(3)),
        (FixedKind::Random, LayerRange::All),
        (FixedKind::Random, LayerRange::Last(6)),
    ] {
        let s = fixed_strategy(kind, range, layers, 7)?;
        let shown: Vec<String> = s.iter().map(|v| format!("{v:.3}")).collect();
        println!("{kind:?} {range}: [{}]", shown.join(" "));
    }
    Ok(())
}
