//! Fused single-direction GRU scan.
//!
//! Gates follow the usual reset/update/candidate layout, packed as
//! `[reset | update | candidate]` along the `3h` axis:
//!
//! ```text
//! r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//! z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
//! n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! The initial state is zero. A reversed scan walks positions from last to
//! first; output row `t` is always the state after consuming position `t`.

use super::kernels::{add_into, sigmoid};

/// Activations saved by [`forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    steps: usize,
    hidden: usize,
    reverse: bool,
    // Per processed step: h_prev, r, z, n, hn (each `hidden` wide).
    saved: Vec<f64>,
}

pub struct GruGrads {
    pub x: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

fn position(step: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - step
    } else {
        step
    }
}

/// `row (1 x k) * w (k x cols)` added into `out`.
fn row_times(row: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (p, &v) in row.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[p * cols..(p + 1) * cols]) {
            *o += v * wv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    x: &[f64],
    steps: usize,
    input: usize,
    hidden: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    b_ih: &[f64],
    b_hh: &[f64],
    reverse: bool,
) -> (Vec<f64>, GruCache) {
    let h3 = 3 * hidden;
    let mut out = vec![0.0; steps * hidden];
    let mut saved = Vec::with_capacity(steps * 5 * hidden);
    let mut h = vec![0.0; hidden];
    let mut gi = vec![0.0; h3];
    let mut gh = vec![0.0; h3];
    for step in 0..steps {
        let t = position(step, steps, reverse);
        gi.copy_from_slice(b_ih);
        row_times(&x[t * input..(t + 1) * input], w_ih, h3, &mut gi);
        gh.copy_from_slice(b_hh);
        row_times(&h, w_hh, h3, &mut gh);

        saved.extend_from_slice(&h);
        let base = saved.len();
        saved.resize(base + 4 * hidden, 0.0);
        let (r, rest) = saved[base..].split_at_mut(hidden);
        let (z, rest) = rest.split_at_mut(hidden);
        let (n, hn) = rest.split_at_mut(hidden);
        for j in 0..hidden {
            r[j] = sigmoid(gi[j] + gh[j]);
            z[j] = sigmoid(gi[hidden + j] + gh[hidden + j]);
            hn[j] = gh[2 * hidden + j];
            n[j] = (gi[2 * hidden + j] + r[j] * hn[j]).tanh();
            h[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
        }
        out[t * hidden..(t + 1) * hidden].copy_from_slice(&h);
    }
    (
        out,
        GruCache {
            steps,
            hidden,
            reverse,
            saved,
        },
    )
}

/// Backpropagation through time for one scan, given `d_out` for every output row.
pub fn backward(
    cache: &GruCache,
    x: &[f64],
    input: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    d_out: &[f64],
) -> GruGrads {
    let hidden = cache.hidden;
    let steps = cache.steps;
    let h3 = 3 * hidden;
    let mut grads = GruGrads {
        x: vec![0.0; steps * input],
        w_ih: vec![0.0; input * h3],
        w_hh: vec![0.0; hidden * h3],
        b_ih: vec![0.0; h3],
        b_hh: vec![0.0; h3],
    };
    let mut dh_next = vec![0.0; hidden];
    let mut d_gi = vec![0.0; h3];
    let mut d_gh = vec![0.0; h3];
    for step in (0..steps).rev() {
        let t = position(step, steps, cache.reverse);
        let s = &cache.saved[step * 5 * hidden..(step + 1) * 5 * hidden];
        let (h_prev, rest) = s.split_at(hidden);
        let (r, rest) = rest.split_at(hidden);
        let (z, rest) = rest.split_at(hidden);
        let (n, hn) = rest.split_at(hidden);

        let mut dh = d_out[t * hidden..(t + 1) * hidden].to_vec();
        add_into(&mut dh, &dh_next);

        for j in 0..hidden {
            let dn = dh[j] * (1.0 - z[j]);
            let dz = dh[j] * (h_prev[j] - n[j]);
            let da_n = dn * (1.0 - n[j] * n[j]);
            let dr = da_n * hn[j];
            let da_r = dr * r[j] * (1.0 - r[j]);
            let da_z = dz * z[j] * (1.0 - z[j]);
            d_gi[j] = da_r;
            d_gi[hidden + j] = da_z;
            d_gi[2 * hidden + j] = da_n;
            d_gh[j] = da_r;
            d_gh[hidden + j] = da_z;
            d_gh[2 * hidden + j] = da_n * r[j];
            dh_next[j] = dh[j] * z[j];
        }

        let x_row = &x[t * input..(t + 1) * input];
        let dx_row = &mut grads.x[t * input..(t + 1) * input];
        for p in 0..input {
            let w_row = &w_ih[p * h3..(p + 1) * h3];
            dx_row[p] += w_row.iter().zip(&d_gi).map(|(w, g)| w * g).sum::<f64>();
            let xv = x_row[p];
            if xv != 0.0 {
                for (o, g) in grads.w_ih[p * h3..(p + 1) * h3].iter_mut().zip(&d_gi) {
                    *o += xv * g;
                }
            }
        }
        for p in 0..hidden {
            let w_row = &w_hh[p * h3..(p + 1) * h3];
            dh_next[p] += w_row.iter().zip(&d_gh).map(|(w, g)| w * g).sum::<f64>();
            let hv = h_prev[p];
            if hv != 0.0 {
                for (o, g) in grads.w_hh[p * h3..(p + 1) * h3].iter_mut().zip(&d_gh) {
                    *o += hv * g;
                }
            }
        }
        add_into(&mut grads.b_ih, &d_gi);
        add_into(&mut grads.b_hh, &d_gh);
    }
    grads
}
