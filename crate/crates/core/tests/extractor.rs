mod common;

use common::{random_tensor, random_vec, rng};
use hire::encoder::HiddenStates;
use hire::extractor::{
    complement, extract, fixed_strategy, normalize, score, summarize, FixedKind, HireParams, LayerRange,
};
use hire::numerics::{grad_check_params, stream, Graph, Initializer, Mode, ParamSet, Tensor, Var};
use proptest::prelude::*;

fn hire(hidden: usize, seed: u64) -> (ParamSet, HireParams) {
    let mut params = ParamSet::new();
    let h = HireParams::init(&mut params, hidden, &Initializer::new(seed)).unwrap();
    (params, h)
}

fn states(g: &mut Graph<'_>, tensors: &[Tensor], length: usize) -> HiddenStates {
    HiddenStates {
        states: tensors.iter().map(|t| g.constant(t.clone())).collect(),
        length,
    }
}

fn set_scorer(params: &mut ParamSet, w: Vec<f64>, b: f64) {
    let wid = params.id("hire.scorer.w").unwrap();
    *params.get_mut(wid) = Tensor::vector(w);
    let bid = params.id("hire.scorer.b").unwrap();
    *params.get_mut(bid) = Tensor::vector(vec![b]);
}

#[test]
fn zero_summarizer_gives_zero_summary_of_width_4d() {
    let (mut params, h) = hire(16, 1);
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, n, _)| n.starts_with("hire.summarizer"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        params.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::with_params(&params, Mode::Eval);
    let x = g.constant(random_tensor(&mut rng(2), &[6, 16]));
    let u = summarize(&mut g, x, 6, &h.summarizer, 0.0, &mut stream(0, "t")).unwrap();
    assert_eq!(g.value(u), &Tensor::zeros(&[64]));
}

#[test]
fn summary_of_one_step_is_direction_symmetric() {
    let (mut params, h) = hire(4, 3);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, n, _)| n.contains(".fwd."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    for name in names {
        let value = params.by_name(&name).unwrap().clone();
        let bwd = params.id(&name.replace(".fwd.", ".bwd.")).unwrap();
        *params.get_mut(bwd) = value;
    }
    let mut g = Graph::with_params(&params, Mode::Eval);
    let x = g.constant(random_tensor(&mut rng(4), &[1, 4]));
    let u = summarize(&mut g, x, 1, &h.summarizer, 0.0, &mut stream(0, "t")).unwrap();
    let u = g.value(u).data();
    // layer-major, forward before backward, each 4 wide
    assert_eq!(u[0..4], u[4..8]);
    assert_eq!(u[8..12], u[12..16]);
}

#[test]
fn summarize_rejects_bad_lengths() {
    let (params, h) = hire(4, 1);
    let mut g = Graph::with_params(&params, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[3, 4]));
    assert!(summarize(&mut g, x, 0, &h.summarizer, 0.0, &mut stream(0, "t")).is_err());
    assert!(summarize(&mut g, x, 4, &h.summarizer, 0.0, &mut stream(0, "t")).is_err());
}

#[test]
fn score_examples() {
    let (mut params, h) = hire(2, 1);
    let mut e1 = vec![0.0; 8];
    e1[0] = 1.0;
    let u = Tensor::from_rows(&[e1.clone(), vec![0.5; 8]]).unwrap();
    let run = |params: &ParamSet| {
        let mut g = Graph::with_params(params, Mode::Eval);
        let u = g.constant(u.clone());
        let a = score(&mut g, u, &h.scorer).unwrap();
        g.value(a).data().to_vec()
    };
    set_scorer(&mut params, vec![0.0; 8], 0.0);
    assert_eq!(run(&params), [0.0, 0.0]);
    set_scorer(&mut params, vec![0.0; 8], -1.0);
    assert_eq!(run(&params), [0.0, 0.0]);
    let w: Vec<f64> = e1.iter().map(|v| 2.0 * v).collect();
    set_scorer(&mut params, w, 0.5);
    assert_eq!(run(&params)[0], 2.5);

    let mut g = Graph::with_params(&params, Mode::Eval);
    let narrow = g.constant(Tensor::zeros(&[2, 7]));
    assert!(score(&mut g, narrow, &h.scorer).is_err());
}

fn normalized(alpha: &[f64]) -> Vec<f64> {
    let mut g = Graph::new(Mode::Eval);
    let a = g.constant(Tensor::vector(alpha.to_vec()));
    let s = normalize(&mut g, a).unwrap();
    g.value(s).data().to_vec()
}

#[test]
fn normalize_examples() {
    assert_eq!(normalized(&[0.0; 5]), [0.2; 5]);
    let s = normalized(&[2f64.ln(), 0.0]);
    assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
    let alpha = random_vec(&mut rng(5), 5);
    let total: f64 = alpha.iter().map(|a| a.exp()).sum();
    for (s, a) in normalized(&alpha).iter().zip(&alpha) {
        assert!((s - a.exp() / total).abs() < 1e-12);
    }
}

fn weighted(s: &[f64], tensors: &[Tensor]) -> Tensor {
    let mut g = Graph::new(Mode::Eval);
    let hidden = states(&mut g, tensors, tensors[0].rows());
    let sv = g.constant(Tensor::vector(s.to_vec()));
    let a = complement(&mut g, sv, &hidden).unwrap();
    g.value(a).clone()
}

#[test]
fn complement_selects_one_hot_layers_exactly() {
    let mut r = rng(6);
    let hs: Vec<Tensor> = (0..5).map(|_| random_tensor(&mut r, &[4, 3])).collect();
    for j in 0..5 {
        let mut s = vec![0.0; 5];
        s[j] = 1.0;
        assert_eq!(weighted(&s, &hs), hs[j]);
    }
}

#[test]
fn complement_of_ones_and_threes() {
    let a = weighted(&[0.5, 0.5], &[Tensor::full(&[2, 3], 1.0), Tensor::full(&[2, 3], 3.0)]);
    assert_eq!(a, Tensor::full(&[2, 3], 2.0));
}

#[test]
fn complement_matches_naive_double_loop() {
    let mut r = rng(7);
    let hs: Vec<Tensor> = (0..5).map(|_| random_tensor(&mut r, &[6, 4])).collect();
    let s = normalized(&random_vec(&mut r, 5));
    let a = weighted(&s, &hs);
    for t in 0..6 {
        for c in 0..4 {
            let mut acc = 0.0;
            for (i, h) in hs.iter().enumerate() {
                acc += s[i] * h.at(t, c);
            }
            assert!((a.at(t, c) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn complement_rejects_length_mismatch() {
    let mut g = Graph::new(Mode::Eval);
    let hidden = states(&mut g, &[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])], 2);
    let s = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
    assert!(complement(&mut g, s, &hidden).is_err());
}

#[test]
fn extract_shapes_on_default_sizes() {
    let (params, h) = hire(16, 8);
    let mut r = rng(8);
    let hs: Vec<Tensor> = (0..5).map(|_| random_tensor(&mut r, &[8, 16])).collect();
    let mut g = Graph::with_params(&params, Mode::Eval);
    let hidden = states(&mut g, &hs, 8);
    let imp = extract(&mut g, &hidden, &h, 0.1, &mut stream(0, "t")).unwrap();
    assert_eq!(g.shape(imp.u), &[5, 64]);
    assert_eq!(g.shape(imp.alpha), &[5]);
    assert_eq!(g.shape(imp.s), &[5]);
    assert_eq!(g.shape(imp.a), &[8, 16]);
    let snap = imp.snapshot(&g);
    assert!(snap.alpha.iter().all(|&a| a >= 0.0));
    assert!((snap.s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn identical_states_give_uniform_weights_and_a_fixed_point() {
    let (params, h) = hire(4, 9);
    let state = random_tensor(&mut rng(9), &[5, 4]);
    let mut g = Graph::with_params(&params, Mode::Eval);
    let hidden = states(&mut g, &vec![state.clone(); 4], 5);
    let imp = extract(&mut g, &hidden, &h, 0.0, &mut stream(0, "t")).unwrap();
    for &s in g.value(imp.s).data() {
        assert!((s - 0.25).abs() < 1e-15);
    }
    assert!(g.value(imp.a).max_abs_diff(&state) < 1e-12);
}

#[test]
fn summaries_depend_only_on_content() {
    let (params, h) = hire(4, 10);
    let mut r = rng(10);
    let hs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[4, 4])).collect();
    let reversed: Vec<Tensor> = hs.iter().rev().cloned().collect();
    let mut g = Graph::with_params(&params, Mode::Eval);
    let a = states(&mut g, &hs, 4);
    let b = states(&mut g, &reversed, 4);
    let ia = extract(&mut g, &a, &h, 0.0, &mut stream(0, "t")).unwrap();
    let ib = extract(&mut g, &b, &h, 0.0, &mut stream(0, "t")).unwrap();
    let (ua, ub) = (g.value(ia.u).clone(), g.value(ib.u).clone());
    for i in 0..3 {
        assert_eq!(ua.row(i), ub.row(2 - i));
    }
}

#[test]
fn padding_rows_do_not_affect_importance() {
    let (params, h) = hire(4, 11);
    let mut r = rng(11);
    let real: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[3, 4])).collect();
    let padded: Vec<Tensor> = real
        .iter()
        .map(|t| {
            let mut rows: Vec<Vec<f64>> = (0..3).map(|i| t.row(i).to_vec()).collect();
            rows.extend((0..2).map(|_| random_vec(&mut r, 4)));
            Tensor::from_rows(&rows).unwrap()
        })
        .collect();
    let mut g = Graph::with_params(&params, Mode::Eval);
    let a = states(&mut g, &real, 3);
    let b = states(&mut g, &padded, 3);
    let ia = extract(&mut g, &a, &h, 0.0, &mut stream(0, "t")).unwrap();
    let ib = extract(&mut g, &b, &h, 0.0, &mut stream(0, "t")).unwrap();
    assert_eq!(g.value(ia.alpha), g.value(ib.alpha));
    assert_eq!(g.value(ia.s), g.value(ib.s));
}

#[test]
fn one_summarizer_regardless_of_depth() {
    let (params, _) = hire(4, 1);
    let gru_tensors = params.iter().filter(|(_, n, _)| n.starts_with("hire.summarizer")).count();
    // two layers, two directions, four tensors each
    assert_eq!(gru_tensors, 16);
}

#[test]
fn gradient_of_a_passes_grad_check() {
    let (params, h) = hire(4, 12);
    let mut r = rng(12);
    let hs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[3, 4])).collect();
    let report = grad_check_params(
        &params,
        |g| {
            let hidden = states(g, &hs, 3);
            let imp = extract(g, &hidden, &h, 0.0, &mut stream(0, "t"))?;
            let w = g.constant(random_tensor(&mut rng(13), &[3, 4]));
            let y = g.mul(imp.a, w)?;
            Ok::<Var, hire::Error>(g.sum(y)?)
        },
        |_, _| true,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    let scorer_only = grad_check_params(
        &params,
        |g| {
            let hidden = states(g, &hs, 3);
            let imp = extract(g, &hidden, &h, 0.0, &mut stream(0, "t"))?;
            Ok::<Var, hire::Error>(g.sum(imp.a)?)
        },
        |_, name| name.starts_with("hire.scorer"),
        1e-4,
    )
    .unwrap();
    assert!(scorer_only.passed, "{scorer_only:?}");
}

#[test]
fn fixed_mean_strategies() {
    let all = fixed_strategy(FixedKind::Mean, LayerRange::All, 25, 0).unwrap();
    assert!(all.iter().all(|&s| s == 0.04));
    let last = fixed_strategy(FixedKind::Mean, LayerRange::Last(6), 25, 0).unwrap();
    for (i, &s) in last.iter().enumerate() {
        assert_eq!(s, if i >= 19 { 1.0 / 6.0 } else { 0.0 });
    }
    let first = fixed_strategy(FixedKind::Mean, LayerRange::First(2), 5, 0).unwrap();
    assert_eq!(first, [0.5, 0.5, 0.0, 0.0, 0.0]);
}

#[test]
fn fixed_random_strategy_is_a_reproducible_distribution() {
    let a = fixed_strategy(FixedKind::Random, LayerRange::All, 25, 3).unwrap();
    assert_eq!(a, fixed_strategy(FixedKind::Random, LayerRange::All, 25, 3).unwrap());
    assert_ne!(a, fixed_strategy(FixedKind::Random, LayerRange::All, 25, 4).unwrap());
    assert!(a.iter().all(|&s| s > 0.0));
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let last = fixed_strategy(FixedKind::Random, LayerRange::Last(3), 5, 3).unwrap();
    assert_eq!(last[..2], [0.0, 0.0]);
    assert!((last.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn fixed_strategy_rejects_empty_or_oversized_ranges() {
    assert!(fixed_strategy(FixedKind::Mean, LayerRange::Last(0), 5, 0).is_err());
    assert!(fixed_strategy(FixedKind::Random, LayerRange::First(6), 5, 0).is_err());
}

proptest! {
    #[test]
    fn weights_form_a_distribution(alpha in prop::collection::vec(0.0f64..50.0, 1..30)) {
        let s = normalized(&alpha);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
