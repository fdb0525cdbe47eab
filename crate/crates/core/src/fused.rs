//! Hand-derived batched passes through the LSE-ICNN for the training loop.
//!
//! The generic [`Tape`](crate::autodiff::Tape) pays for one allocation per
//! node and one tangent stream per input coordinate. Here the value, the
//! input gradient and the parameter gradients of
//!
//! * `Σₙ cₙ LSE(xₙ)` (value and density losses), and
//! * `Σₙ rₙ · ∇LSE(xₙ)` with frozen `rₙ` (gradient loss, since
//!   `∂/∂θ Σ|∇LSE − Y|²` equals this with `rₙ = 2(∇LSE(xₙ) − Yₙ)`)
//!
//! are computed with one forward sweep, one reverse input sweep and a
//! single tangent stream. Tests cross-check every output against the tape.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::autodiff::{sigmoid, softplus_with_slope, ParamStore};
use crate::icnn::IcnnSlices;
use crate::mixture::{gate, log_gate, ModelSlices};

struct Hidden {
    h: Vec<f64>,
    /// `σ(z)`, the slope of the softplus.
    s: Vec<f64>,
}

/// Forward state of one mode over a batch.
pub(crate) struct ModeCache {
    hidden: Vec<Hidden>,
    pub(crate) y: Array1<f64>,
}

/// Tangent stream `(dz_k, dh_k)` of every hidden layer along one direction.
struct TangentCache {
    dz: Vec<Vec<f64>>,
    dh: Vec<Vec<f64>>,
}

/// Row-major views of one layer: `v` is `out × d`, `w` is `out × prev`.
struct Layer<'a> {
    v: &'a [f64],
    w: Option<&'a [f64]>,
    b: &'a [f64],
    out: usize,
    v_range: Range<usize>,
    w_range: Option<Range<usize>>,
    b_range: Range<usize>,
}

fn layers<'a>(store: &'a ParamStore, sl: &IcnnSlices) -> Vec<Layer<'a>> {
    sl.layers
        .iter()
        .map(|ls| Layer {
            v: store.get(ls.v),
            w: ls.w.map(|w| store.get(w)),
            b: store.get(ls.b),
            out: store.slice(ls.b).cols,
            v_range: store.slice(ls.v).range(),
            w_range: ls.w.map(|w| store.slice(w).range()),
            b_range: store.slice(ls.b).range(),
        })
        .collect()
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[r, :] += Σⱼ a[r, j] · bt[j, :]` for `a: n × k`, `bt: k × o`.
fn add_matmul(out: &mut [f64], a: &[f64], bt: &[f64], k: usize, o: usize) {
    for (orow, arow) in out.chunks_exact_mut(o).zip(a.chunks_exact(k)) {
        for (j, &aj) in arow.iter().enumerate() {
            axpy(orow, aj, &bt[j * o..(j + 1) * o]);
        }
    }
}

/// `g[i, :] += Σᵣ a[r, i] · b[r, :]` for `a: n × o`, `b: n × k`.
fn add_outer(g: &mut [f64], a: &[f64], b: &[f64], o: usize, k: usize) {
    for (arow, brow) in a.chunks_exact(o).zip(b.chunks_exact(k)) {
        for (i, &ai) in arow.iter().enumerate() {
            axpy(&mut g[i * k..(i + 1) * k], ai, brow);
        }
    }
}

fn contiguous<'a>(x: &'a ArrayView2<'_, f64>) -> std::borrow::Cow<'a, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

pub(crate) fn mode_forward(store: &ParamStore, sl: &IcnnSlices, x: ArrayView2<'_, f64>) -> ModeCache {
    let (n, d) = x.dim();
    let xs = contiguous(&x);
    let ls = layers(store, sl);
    let last = ls.len() - 1;
    let mut hidden: Vec<Hidden> = Vec::with_capacity(last);
    let mut prev_width = 0;
    for (k, l) in ls.iter().enumerate() {
        let o = l.out;
        let mut z: Vec<f64> = l.b.repeat(n);
        add_matmul(&mut z, &xs, &transpose(l.v, o, d), d, o);
        if let (Some(w), Some(prev)) = (l.w, hidden.last()) {
            add_matmul(&mut z, &prev.h, &transpose(w, o, prev_width), prev_width, o);
        }
        if k == last {
            return ModeCache { hidden, y: Array1::from(z) };
        }
        let mut s = vec![0.0; z.len()];
        for (zi, si) in z.iter_mut().zip(&mut s) {
            (*zi, *si) = softplus_with_slope(*zi);
        }
        hidden.push(Hidden { h: z, s });
        prev_width = o;
    }
    unreachable!("an ICNN always has an output layer")
}

/// Rows are `∇ₓf(xₙ)`.
pub(crate) fn mode_input_gradient(store: &ParamStore, sl: &IcnnSlices, cache: &ModeCache, n: usize) -> Array2<f64> {
    let ls = layers(store, sl);
    let last = ls.len() - 1;
    let d = ls[last].v.len();
    let mut gx: Vec<f64> = ls[last].v.repeat(n);
    let mut zbar = vec![1.0; n];
    let mut width = 1;
    for k in (0..last).rev() {
        let o = ls[k].out;
        let mut hbar = vec![0.0; n * o];
        add_matmul(&mut hbar, &zbar, ls[k + 1].w.expect("hidden weight"), width, o);
        for (hb, s) in hbar.iter_mut().zip(&cache.hidden[k].s) {
            *hb *= s;
        }
        add_matmul(&mut gx, &hbar, ls[k].v, o, d);
        zbar = hbar;
        width = o;
    }
    Array2::from_shape_vec((n, d), gx).expect("gradient shape")
}

fn mode_tangent(store: &ParamStore, sl: &IcnnSlices, cache: &ModeCache, r: &[f64], n: usize) -> TangentCache {
    let ls = layers(store, sl);
    let last = ls.len() - 1;
    let d = r.len() / n;
    let mut dz_all: Vec<Vec<f64>> = Vec::with_capacity(last);
    let mut dh_all: Vec<Vec<f64>> = Vec::with_capacity(last);
    let mut prev_width = 0;
    for (k, l) in ls.iter().take(last).enumerate() {
        let o = l.out;
        let mut dz = vec![0.0; n * o];
        add_matmul(&mut dz, r, &transpose(l.v, o, d), d, o);
        if let (Some(w), Some(prev)) = (l.w, dh_all.last()) {
            add_matmul(&mut dz, prev, &transpose(w, o, prev_width), prev_width, o);
        }
        let dh: Vec<f64> = dz.iter().zip(&cache.hidden[k].s).map(|(a, b)| a * b).collect();
        dz_all.push(dz);
        dh_all.push(dh);
        prev_width = o;
    }
    TangentCache { dz: dz_all, dh: dh_all }
}

/// Accumulates into `grad` the parameter gradient of
/// `Σₙ aₙ f(xₙ) + Σₙ bₙ ∇f(xₙ)·rₙ`.
fn mode_backward(
    store: &ParamStore,
    sl: &IcnnSlices,
    x: &[f64],
    cache: &ModeCache,
    a: Vec<f64>,
    tangent: Option<(&[f64], &TangentCache, Vec<f64>)>,
    grad: &mut [f64],
) {
    let n = a.len();
    let d = x.len() / n;
    let ls = layers(store, sl);
    let last = ls.len() - 1;
    let mut zbar = a;
    let (r, tc, mut dzbar) = match tangent {
        Some((r, tc, b)) => (Some(r), Some(tc), Some(b)),
        None => (None, None, None),
    };
    for k in (0..=last).rev() {
        let l = &ls[k];
        let o = l.out;
        add_outer(&mut grad[l.v_range.clone()], &zbar, x, o, d);
        if let (Some(dzb), Some(r)) = (&dzbar, r) {
            add_outer(&mut grad[l.v_range.clone()], dzb, r, o, d);
        }
        let gb = &mut grad[l.b_range.clone()];
        for row in zbar.chunks_exact(o) {
            axpy(gb, 1.0, row);
        }
        if k == 0 {
            break;
        }
        let prev = &cache.hidden[k - 1];
        let m = ls[k - 1].out;
        let w = l.w.expect("hidden weight");
        let w_range = l.w_range.clone().expect("hidden weight");
        add_outer(&mut grad[w_range.clone()], &zbar, &prev.h, o, m);
        let mut hbar = vec![0.0; n * m];
        add_matmul(&mut hbar, &zbar, w, o, m);
        match (&mut dzbar, tc) {
            (Some(dzb), Some(tc)) => {
                add_outer(&mut grad[w_range], dzb, &tc.dh[k - 1], o, m);
                let mut dhbar = vec![0.0; n * m];
                add_matmul(&mut dhbar, dzb, w, o, m);
                for i in 0..n * m {
                    let s = prev.s[i];
                    hbar[i] = hbar[i] * s + dhbar[i] * tc.dz[k - 1][i] * s * (1.0 - s);
                    dhbar[i] *= s;
                }
                *dzb = dhbar;
            }
            _ => hbar.iter_mut().zip(&prev.s).for_each(|(h, s)| *h *= s),
        }
        zbar = hbar;
    }
}

/// Forward state of the whole mixture over a batch.
pub(crate) struct LseCache {
    pub(crate) modes: Vec<ModeCache>,
    /// `n × N` mode outputs.
    pub(crate) f: Array2<f64>,
    /// `n × N` membership weights.
    pub(crate) w: Array2<f64>,
    pub(crate) value: Array1<f64>,
    pub(crate) rho: f64,
}

pub(crate) fn lse_forward(store: &ParamStore, sl: &ModelSlices, x: ArrayView2<'_, f64>) -> LseCache {
    let n = x.nrows();
    let modes: Vec<ModeCache> = sl.modes.iter().map(|m| mode_forward(store, m, x)).collect();
    let n_modes = modes.len();
    let rho = sl.rho(store);
    let log_gates: Vec<f64> = store.get(sl.alpha).iter().map(|&a| log_gate(a)).collect();
    let f = Array2::from_shape_fn((n, n_modes), |(r, i)| modes[i].y[r]);
    let mut w = Array2::zeros((n, n_modes));
    let mut value = Array1::zeros(n);
    let ln_n = (n_modes as f64).ln();
    for r in 0..n {
        let mut m = f64::NEG_INFINITY;
        for i in 0..n_modes {
            let e = -rho * f[[r, i]] + log_gates[i];
            w[[r, i]] = e;
            m = m.max(e);
        }
        let mut sum = 0.0;
        for i in 0..n_modes {
            let p = (w[[r, i]] - m).exp();
            w[[r, i]] = p;
            sum += p;
        }
        for i in 0..n_modes {
            w[[r, i]] /= sum;
        }
        value[r] = -(m + sum.ln() - ln_n) / rho;
    }
    LseCache { modes, f, w, value, rho }
}

/// `∂ log ς(a) / ∂a`.
fn dlog_gate(a: f64) -> f64 {
    5.0 * (1.0 - gate(a))
}

/// Adds the parameter gradient of `Σₙ cₙ LSE(xₙ)` to `grad`.
pub(crate) fn lse_value_backward(
    store: &ParamStore,
    sl: &ModelSlices,
    x: ArrayView2<'_, f64>,
    cache: &LseCache,
    c: ArrayView1<'_, f64>,
    grad: &mut [f64],
) {
    let rho = cache.rho;
    let alpha = store.get(sl.alpha);
    let a_off = store.slice(sl.alpha).offset;
    let mut g_rho = 0.0;
    for (r, &cr) in c.iter().enumerate() {
        let wf: f64 = cache.w.row(r).dot(&cache.f.row(r));
        g_rho += cr * (wf - cache.value[r]) / rho;
        for (i, &ai) in alpha.iter().enumerate() {
            grad[a_off + i] -= cr * cache.w[[r, i]] * dlog_gate(ai) / rho;
        }
    }
    grad[store.slice(sl.rho_raw).offset] += g_rho * sigmoid(store.get(sl.rho_raw)[0]);
    let xs = contiguous(&x);
    for (i, (m, mc)) in sl.modes.iter().zip(&cache.modes).enumerate() {
        let a: Vec<f64> = c.iter().zip(cache.w.column(i)).map(|(c, w)| c * w).collect();
        mode_backward(store, m, &xs, mc, a, None, grad);
    }
}

/// Input gradients `∇LSE(xₙ)` together with each mode's `∇fᵢ(xₙ)`.
pub(crate) fn lse_input_gradient(store: &ParamStore, sl: &ModelSlices, cache: &LseCache, n: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let per_mode: Vec<Array2<f64>> = sl.modes.iter().zip(&cache.modes).map(|(m, mc)| mode_input_gradient(store, m, mc, n)).collect();
    let mut g = Array2::zeros(per_mode[0].raw_dim());
    for (i, gi) in per_mode.iter().enumerate() {
        g += &(gi * &cache.w.column(i).insert_axis(Axis(1)));
    }
    (g, per_mode)
}

/// Adds the parameter gradient of `Σₙ rₙ · ∇LSE(xₙ)` to `grad`, with `r` held fixed.
pub(crate) fn lse_directional_backward(
    store: &ParamStore,
    sl: &ModelSlices,
    x: ArrayView2<'_, f64>,
    cache: &LseCache,
    mode_grads: &[Array2<f64>],
    r: ArrayView2<'_, f64>,
    grad: &mut [f64],
) {
    let n = x.nrows();
    let n_modes = sl.modes.len();
    let rho = cache.rho;
    // t[n, i] = ∇fᵢ(xₙ)·rₙ and u[n] = Σᵢ wᵢ tᵢ.
    let t = Array2::from_shape_fn((n, n_modes), |(row, i)| mode_grads[i].row(row).dot(&r.row(row)));
    let u = (&t * &cache.w).sum_axis(Axis(1));
    // ∂u/∂Eᵢ = wᵢ(tᵢ − u).
    let mut de = t;
    Zip::from(de.rows_mut()).and(cache.w.rows()).and(&u).for_each(|mut d, w, &ur| {
        Zip::from(&mut d).and(&w).for_each(|d, &wi| *d = wi * (*d - ur));
    });

    let alpha = store.get(sl.alpha);
    let a_off = store.slice(sl.alpha).offset;
    let de_col = de.sum_axis(Axis(0));
    for (i, &ai) in alpha.iter().enumerate() {
        grad[a_off + i] += de_col[i] * dlog_gate(ai);
    }
    let g_rho = -(&de * &cache.f).sum();
    grad[store.slice(sl.rho_raw).offset] += g_rho * sigmoid(store.get(sl.rho_raw)[0]);

    let xs = contiguous(&x);
    let rs = contiguous(&r);
    for (i, (m, mc)) in sl.modes.iter().zip(&cache.modes).enumerate() {
        let a: Vec<f64> = de.column(i).iter().map(|v| -rho * v).collect();
        let b: Vec<f64> = cache.w.column(i).to_vec();
        let tc = mode_tangent(store, m, mc, &rs, n);
        mode_backward(store, m, &xs, mc, a, Some((&rs, &tc, b)), grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::eval_with_param_grad;
    use crate::icnn::Tangent;
    use crate::mixture::{LseModel, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, seed: u64) -> (LseModel, Array2<f64>, Array2<f64>) {
        let m = LseModel::new(ModelConfig { input_dim: d, n_modes: 3, n_hidden_layers: 3, hidden_width: 4 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = Array2::from_shape_fn((17, d), |_| rng.gen_range(-2.0..2.0));
        let r = Array2::from_shape_fn((17, d), |_| rng.gen_range(-1.0..1.0));
        (m, x, r)
    }

    fn close(a: &[f64], b: &[f64]) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= 1e-11 * (1.0 + x.abs().max(y.abs())), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn forward_and_input_gradient_match_pointwise() {
        let (m, x, _) = setup(3, 1);
        let (store, sl) = m.to_store();
        let cache = lse_forward(&store, &sl, x.view());
        let (g, _) = lse_input_gradient(&store, &sl, &cache, x.nrows());
        for (row, xr) in x.rows().into_iter().enumerate() {
            let xr = xr.to_vec();
            assert!((cache.value[row] - m.forward(&xr).unwrap()).abs() < 1e-13);
            close(g.row(row).as_slice().unwrap(), &m.input_gradient(&xr).unwrap());
        }
    }

    #[test]
    fn value_backward_matches_tape() {
        let (m, x, _) = setup(2, 2);
        let (store, sl) = m.to_store();
        let c = Array1::from_shape_fn(x.nrows(), |i| (i as f64 * 0.37).sin());
        let mut grad = store.zeros_like();
        let cache = lse_forward(&store, &sl, x.view());
        lse_value_backward(&store, &sl, x.view(), &cache, c.view(), &mut grad);
        let (_, reference) = eval_with_param_grad(&store, |tape| {
            let xv = tape.constant(x.clone());
            let y = sl.forward_tape(tape, xv);
            let cv = tape.constant(c.clone().insert_axis(Axis(1)));
            let p = tape.mul(y, cv);
            tape.sum(p)
        })
        .unwrap();
        close(&grad, &reference);
    }

    #[test]
    fn directional_backward_matches_tape() {
        for d in [1, 3] {
            let (m, x, r) = setup(d, 3 + d as u64);
            let (store, sl) = m.to_store();
            let cache = lse_forward(&store, &sl, x.view());
            let (_, per_mode) = lse_input_gradient(&store, &sl, &cache, x.nrows());
            let mut grad = store.zeros_like();
            lse_directional_backward(&store, &sl, x.view(), &cache, &per_mode, r.view(), &mut grad);
            let (_, reference) = eval_with_param_grad(&store, |tape| {
                let xv = tape.constant(x.clone());
                let rv = tape.constant(r.clone());
                let out = sl.forward_tape_with_tangents(tape, xv, &[Tangent::PerSample(rv)]);
                tape.sum(out.tangents[0])
            })
            .unwrap();
            close(&grad, &reference);
        }
    }
}
