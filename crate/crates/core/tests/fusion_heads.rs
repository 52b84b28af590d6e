mod common;

use common::{random_tensor, random_vec, rng};
use hire::fusion::{combine, fuse, self_combine, FusionParams};
use hire::heads::{aggregate, argmax, head_forward, predict_proba, HeadParams};
use hire::numerics::{grad_check, grad_check_params, stream, Graph, Initializer, Mode, ParamSet, Tensor, Var};
use proptest::prelude::*;

fn combined(r: &Tensor, a: &Tensor) -> Tensor {
    let mut g = Graph::new(Mode::Eval);
    let (rv, av) = (g.constant(r.clone()), g.constant(a.clone()));
    let m = combine(&mut g, rv, av).unwrap();
    g.value(m).clone()
}

#[test]
fn combine_examples() {
    let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let a = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
    assert_eq!(combined(&r, &a).data(), &[1.0, 2.0, 3.0, 4.0, 4.0, 6.0, 3.0, 8.0]);
    let zero = Tensor::zeros(&[1, 2]);
    assert_eq!(combined(&r, &zero).data(), &[1.0, 2.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
}

#[test]
fn combine_blocks_are_recoverable() {
    let mut x = rng(1);
    let (r, a) = (random_tensor(&mut x, &[5, 3]), random_tensor(&mut x, &[5, 3]));
    let m = combined(&r, &a);
    assert_eq!(m.shape(), &[5, 12]);
    for t in 0..5 {
        for c in 0..3 {
            let (rv, av) = (r.at(t, c), a.at(t, c));
            assert_eq!(m.at(t, c), rv);
            assert_eq!(m.at(t, 3 + c), av);
            assert_eq!(m.at(t, 6 + c), rv + av);
            assert_eq!(m.at(t, 9 + c), rv * av);
        }
    }
}

#[test]
fn combine_rejects_shape_mismatch() {
    let mut g = Graph::new(Mode::Eval);
    let r = g.constant(Tensor::zeros(&[2, 3]));
    let a = g.constant(Tensor::zeros(&[3, 3]));
    assert!(combine(&mut g, r, a).is_err());
}

#[test]
fn self_combine_examples() {
    let mut g = Graph::new(Mode::Eval);
    let r = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let m = self_combine(&mut g, r).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 2.0, 1.0, 2.0, 2.0, 4.0, 1.0, 4.0]);

    let rt = random_tensor(&mut rng(2), &[4, 3]);
    let r = g.constant(rt.clone());
    let m = self_combine(&mut g, r).unwrap();
    assert_eq!(g.value(m), &combined(&rt, &rt));

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let m = self_combine(&mut g, z).unwrap();
    assert_eq!(g.value(m), &Tensor::zeros(&[2, 12]));
}

fn fusion(hidden: usize, layers: usize, seed: u64) -> (ParamSet, FusionParams) {
    let mut params = ParamSet::new();
    let f = FusionParams::init(&mut params, hidden, layers, &Initializer::new(seed)).unwrap();
    (params, f)
}

fn fused(params: &ParamSet, f: &FusionParams, m: &Tensor, length: usize) -> Tensor {
    let mut g = Graph::with_params(params, Mode::Eval);
    let mv = g.constant(m.clone());
    let out = fuse(&mut g, mv, length, f, 0.1, &mut stream(0, "t")).unwrap();
    g.value(out).clone()
}

#[test]
fn fused_width_is_2d_for_every_depth() {
    let m = random_tensor(&mut rng(3), &[8, 64]);
    for layers in 0..=3 {
        let (params, f) = fusion(16, layers, 3);
        assert_eq!(f.layer_count(), layers);
        assert_eq!(fused(&params, &f, &m, 8).shape(), &[8, 32]);
    }
    let mut params = ParamSet::new();
    assert!(FusionParams::init(&mut params, 16, 4, &Initializer::new(0)).is_err());
}

#[test]
fn zero_parameters_fuse_to_zero() {
    let m = random_tensor(&mut rng(4), &[5, 16]);
    for layers in [0, 2] {
        let (mut params, f) = fusion(4, layers, 4);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            params.get_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(fused(&params, &f, &m, 5), Tensor::zeros(&[5, 8]));
    }
}

#[test]
fn padded_rows_are_zero_and_do_not_leak() {
    let (params, f) = fusion(4, 2, 5);
    let mut x = rng(5);
    let real = random_tensor(&mut x, &[3, 16]);
    let mut rows: Vec<Vec<f64>> = (0..3).map(|i| real.row(i).to_vec()).collect();
    rows.extend((0..2).map(|_| random_vec(&mut x, 16)));
    let padded = Tensor::from_rows(&rows).unwrap();
    let a = fused(&params, &f, &real, 3);
    let b = fused(&params, &f, &padded, 3);
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert!(b.row(3).iter().chain(b.row(4)).all(|&v| v == 0.0));
}

#[test]
fn every_real_row_influences_the_output() {
    let (params, f) = fusion(4, 2, 6);
    let m = random_tensor(&mut rng(6), &[4, 16]);
    let base = fused(&params, &f, &m, 4);
    for t in 0..4 {
        let mut changed = m.clone();
        changed.data_mut()[t * 16..(t + 1) * 16].fill(0.0);
        assert!(fused(&params, &f, &changed, 4).max_abs_diff(&base) > 0.0, "row {t}");
    }
}

#[test]
fn eval_fuse_is_deterministic() {
    let (params, f) = fusion(4, 2, 7);
    let m = random_tensor(&mut rng(7), &[4, 16]);
    assert_eq!(fused(&params, &f, &m, 4), fused(&params, &f, &m, 4));
}

#[test]
fn fuse_gradients_pass_grad_check() {
    let (params, f) = fusion(4, 1, 8);
    let m = random_tensor(&mut rng(8), &[3, 16]);
    let wrt_params = grad_check_params(
        &params,
        |g| {
            let mv = g.constant(m.clone());
            let out = fuse(g, mv, 3, &f, 0.0, &mut stream(0, "t"))?;
            Ok::<Var, hire::Error>(g.sum(out)?)
        },
        |_, _| true,
        1e-4,
    )
    .unwrap();
    assert!(wrt_params.passed, "{wrt_params:?}");

    // M as the differentiated input; the single layer is rebuilt from
    // constants in registration order (fwd then bwd; w_ih, w_hh, b_ih, b_hh).
    let frozen: Vec<Tensor> = params.iter().map(|(_, _, t)| t.clone()).collect();
    let wrt_m = grad_check(
        |g, mv| {
            let (fw, bw) = (direction(g, &frozen, 0), direction(g, &frozen, 4));
            let f_out = g.gru_scan(mv, fw, false)?;
            let b_out = g.gru_scan(mv, bw, true)?;
            let both = g.concat_cols(&[f_out, b_out])?;
            Ok::<Var, hire::Error>(g.sum(both)?)
        },
        &m,
        1e-4,
    )
    .unwrap();
    assert!(wrt_m.passed, "{wrt_m:?}");
}

fn direction(g: &mut Graph<'_>, frozen: &[Tensor], offset: usize) -> hire::numerics::GruVars {
    hire::numerics::GruVars {
        w_ih: g.constant(frozen[offset].clone()),
        w_hh: g.constant(frozen[offset + 1].clone()),
        b_ih: g.constant(frozen[offset + 2].clone()),
        b_hh: g.constant(frozen[offset + 3].clone()),
    }
}

#[test]
fn aggregate_takes_the_first_row() {
    let mut g = Graph::new(Mode::Eval);
    let f = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![9.0, 9.0]]).unwrap(), true);
    let c = aggregate(&mut g, f).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0]);
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(f).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);

    let mut g = Graph::new(Mode::Eval);
    let single = g.constant(Tensor::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap());
    let c = aggregate(&mut g, single).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 5.0, 6.0]);
}

fn head(in_width: usize, hidden: usize, outputs: usize, seed: u64) -> (ParamSet, HeadParams) {
    let mut params = ParamSet::new();
    let h = HeadParams::init(&mut params, in_width, hidden, outputs, &Initializer::new(seed)).unwrap();
    (params, h)
}

fn head_out(params: &ParamSet, h: &HeadParams, c: &[f64]) -> Vec<f64> {
    let mut g = Graph::with_params(params, Mode::Eval);
    let cv = g.constant(Tensor::vector(c.to_vec()));
    let q = head_forward(&mut g, cv, h).unwrap();
    g.value(q).data().to_vec()
}

fn set(params: &mut ParamSet, name: &str, f: impl Fn(&mut [f64])) {
    let id = params.id(name).unwrap();
    f(params.get_mut(id).data_mut());
}

#[test]
fn head_closed_forms() {
    let (mut params, h) = head(6, 4, 3, 1);
    for name in ["head.w1", "head.b1", "head.w2", "head.b2"] {
        set(&mut params, name, |d| d.fill(0.0));
    }
    assert_eq!(head_out(&params, &h, &[1.0; 6]), [0.0; 3]);
    set(&mut params, "head.w2", |d| d.fill(0.7));
    set(&mut params, "head.b2", |d| d.copy_from_slice(&[1.0, -2.0, 0.5]));
    assert_eq!(head_out(&params, &h, &[3.0; 6]), [1.0, -2.0, 0.5]);
}

#[test]
fn head_matches_two_step_loop() {
    let (mut params, h) = head(6, 4, 3, 2);
    let mut x = rng(2);
    for name in ["head.b1", "head.b2"] {
        let n = params.by_name(name).unwrap().numel();
        let v = random_vec(&mut x, n);
        set(&mut params, name, |d| d.copy_from_slice(&v));
    }
    let c = random_vec(&mut x, 6);
    let q = head_out(&params, &h, &c);
    let w1 = params.by_name("head.w1").unwrap();
    let b1 = params.by_name("head.b1").unwrap().data();
    let w2 = params.by_name("head.w2").unwrap();
    let b2 = params.by_name("head.b2").unwrap().data();
    let hidden: Vec<f64> = (0..4)
        .map(|j| ((0..6).map(|i| w1.at(i, j) * c[i]).sum::<f64>() + b1[j]).tanh())
        .collect();
    for k in 0..3 {
        let expected = (0..4).map(|j| w2.at(j, k) * hidden[j]).sum::<f64>() + b2[k];
        assert!((q[k] - expected).abs() < 1e-12);
    }
}

#[test]
fn head_rejects_width_mismatch() {
    let (params, h) = head(6, 4, 2, 3);
    let mut g = Graph::with_params(&params, Mode::Eval);
    let c = g.constant(Tensor::zeros(&[5]));
    assert!(head_forward(&mut g, c, &h).is_err());
}

#[test]
fn head_output_is_bounded_by_tanh_saturation() {
    let (params, h) = head(4, 4, 2, 4);
    let w2 = params.by_name("head.w2").unwrap();
    let b2 = params.by_name("head.b2").unwrap().data();
    for scale in [1e3, -1e3, 1e6] {
        let q = head_out(&params, &h, &[scale, -scale, 0.5 * scale, 1.0]);
        for k in 0..2 {
            let bound = b2[k].abs() + (0..4).map(|j| w2.at(j, k).abs()).sum::<f64>();
            assert!(q[k].abs() <= bound + 1e-12);
        }
    }
}

#[test]
fn predict_proba_examples() {
    assert_eq!(predict_proba(&[0.0, 0.0]).unwrap(), [0.5, 0.5]);
    let p = predict_proba(&[3f64.ln(), 0.0]).unwrap();
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    assert!(predict_proba(&[1.0]).is_err());
}

proptest! {
    #[test]
    fn predict_proba_is_shift_invariant_and_order_preserving(
        q in prop::collection::vec(-20.0f64..20.0, 2..8),
        c in -100.0f64..100.0,
    ) {
        let p = predict_proba(&q).unwrap();
        let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
        let ps = predict_proba(&shifted).unwrap();
        for (a, b) in p.iter().zip(&ps) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(argmax(&p), argmax(&q));
    }
}
