//! Full-batch ADAM training under value, gradient-matching and negative
//! ELBO losses, each with an L1 penalty on the gate parameters.
//!
//! Batches are cut into fixed-size row chunks. Each chunk gets its own tape
//! and the chunk results are summed in index order, so the sequential and
//! parallel executors produce bit-identical losses and gradients.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Var};
use crate::fused;
use crate::icnn::Tangent;
use crate::mixture::{gate, LseModel, ModelSlices, ACTIVE_THRESHOLD};

/// Rows per tape. Fixed so that results do not depend on the thread count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    /// Rayon over row chunks; identical to `Sequential` when the `parallel`
    /// feature is off.
    #[default]
    Parallel,
}

/// Trapezoid grid used to normalize a 1D log-density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_grid: usize,
    pub kl_weight: f64,
}

impl ElboSpec {
    pub fn abscissae(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.n_grid - 1) as f64;
        (0..self.n_grid).map(|k| self.lo + h * k as f64).collect()
    }

    /// Trapezoid weights matching [`ElboSpec::abscissae`].
    pub fn weights(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.n_grid - 1) as f64;
        let mut w = vec![h; self.n_grid];
        w[0] = 0.5 * h;
        w[self.n_grid - 1] = 0.5 * h;
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LossKind {
    Value,
    Gradient,
    Elbo(ElboSpec),
}

/// What the sparsity term `ε Σᵢ p(αᵢ)` acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePenalty {
    /// `p(α) = |α|`. Drives unused gates to `α = 0`, where `ς(0) ≈ 4.5e-5`.
    #[default]
    Alpha,
    /// `p(α) = ς(α)`. Keeps pushing unused gates towards zero.
    Gate,
}

impl GatePenalty {
    /// `(p(α), p′(α))`, with `p′(0) = 0` for the absolute value.
    pub fn eval(self, a: f64) -> (f64, f64) {
        match self {
            GatePenalty::Alpha => (a.abs(), if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 }),
            GatePenalty::Gate => {
                let g = gate(a);
                (g, 5.0 * g * (1.0 - g))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub epsilon: f64,
    pub on: GatePenalty,
}

impl Penalty {
    pub fn l1(epsilon: f64) -> Self {
        Self { epsilon, on: GatePenalty::Alpha }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_network: f64,
    /// Learning rate for the gate parameters `α` and for `rho_raw`.
    pub lr_gate_scale: f64,
    pub l1_epsilon: f64,
    #[serde(default)]
    pub gate_penalty: GatePenalty,
    pub loss_kind: LossKind,
    pub seed: u64,
    #[serde(default)]
    pub exec: ExecMode,
}

impl TrainConfig {
    /// Published settings: 150k epochs, 1e-3 / 1e-4, ε = 1e-4.
    pub fn full_protocol(loss_kind: LossKind, seed: u64) -> Self {
        Self {
            epochs: 150_000,
            lr_network: 1e-3,
            lr_gate_scale: 1e-4,
            l1_epsilon: 1e-4,
            gate_penalty: GatePenalty::Alpha,
            loss_kind,
            seed,
            exec: ExecMode::default(),
        }
    }

    /// 30k epochs with the gate/scale learning rate raised by the epoch
    /// ratio, so gates can travel the same distance as in 150k epochs.
    pub fn desk(loss_kind: LossKind, seed: u64) -> Self {
        Self { epochs: 30_000, lr_gate_scale: 5e-4, ..Self::full_protocol(loss_kind, seed) }
    }

    pub fn penalty(&self) -> Penalty {
        Penalty { epsilon: self.l1_epsilon, on: self.gate_penalty }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr_network > 0.0 && self.lr_gate_scale > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.l1_epsilon >= 0.0) {
            return bad("l1_epsilon must be >= 0");
        }
        if let LossKind::Elbo(e) = self.loss_kind {
            if e.n_grid < 2 || !(e.hi > e.lo) || !(e.kl_weight >= 0.0) {
                return bad("elbo grid needs n_grid >= 2, hi > lo and kl_weight >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("numerical failure at epoch {epoch} (slice {slice}): {source}")]
    Numerical {
        epoch: usize,
        slice: String,
        #[source]
        source: AutodiffError,
    },
}

/// Inputs with targets. Value targets are `n × 1`, gradient targets are
/// `n × d`, density samples carry `n × 0` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// Per-component weights for the gradient loss; all ones when absent.
    pub component_weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self, TrainError> {
        if inputs.nrows() != targets.nrows() {
            return Err(TrainError::Data(format!("{} input rows but {} target rows", inputs.nrows(), targets.nrows())));
        }
        if inputs.nrows() == 0 {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(TrainError::Data("non-finite entry".into()));
        }
        Ok(Self { inputs, targets, component_weights: None })
    }

    pub fn samples(samples: &[f64]) -> Result<Self, TrainError> {
        let x = Array2::from_shape_vec((samples.len(), 1), samples.to_vec()).expect("column");
        Self::new(x, Array2::zeros((samples.len(), 0)))
    }

    pub fn with_component_weights(mut self, w: Vec<f64>) -> Result<Self, TrainError> {
        if w.len() != self.targets.ncols() || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrainError::Data("component weights must be finite, >= 0 and one per target column".into()));
        }
        self.component_weights = Some(w);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(ndarray::Axis(0), idx),
            targets: self.targets.select(ndarray::Axis(0), idx),
            component_weights: self.component_weights.clone(),
        }
    }

    fn check(&self, kind: &LossKind, input_dim: usize) -> Result<(), TrainError> {
        if self.input_dim() != input_dim {
            return Err(TrainError::Data(format!("model takes {input_dim} inputs, dataset has {}", self.input_dim())));
        }
        let want = match kind {
            LossKind::Value => 1,
            LossKind::Gradient => input_dim,
            LossKind::Elbo(_) => 0,
        };
        if self.targets.ncols() != want {
            return Err(TrainError::Data(format!("loss needs {want} target columns, dataset has {}", self.targets.ncols())));
        }
        if let LossKind::Elbo(e) = kind {
            if input_dim != 1 {
                return Err(TrainError::Data("density fits are one-dimensional".into()));
            }
            if let Some(v) = self.inputs.iter().find(|v| **v < e.lo || **v > e.hi) {
                return Err(TrainError::Data(format!("sample {v} outside grid support [{}, {}]", e.lo, e.hi)));
            }
        }
        Ok(())
    }
}

/// Loss split into its parts, with the gradient of the total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub total: f64,
    pub data_term: f64,
    pub l1_term: f64,
    pub grad: Vec<f64>,
}

enum Job {
    Rows(usize, usize),
    Grid,
}

fn rows_objective(tape: &mut Tape<'_>, slices: &ModelSlices, data: &Dataset, kind: &LossKind, lo: usize, hi: usize) -> Var {
    let n = data.len() as f64;
    let x = tape.constant_view(data.inputs.slice(s![lo..hi, ..]));
    match kind {
        LossKind::Value => {
            let y = slices.forward_tape(tape, x);
            let t = tape.constant_view(data.targets.slice(s![lo..hi, ..]));
            let r = tape.sub(y, t);
            let sq = tape.powi(r, 2);
            let total = tape.sum(sq);
            tape.scale(total, 1.0 / n)
        }
        LossKind::Gradient => {
            let d = data.input_dim();
            let tangents: Vec<Tangent> = (0..d).map(Tangent::Coordinate).collect();
            let out = slices.forward_tape_with_tangents(tape, x, &tangents);
            let pred = tape.concat_cols(&out.tangents);
            let t = tape.constant_view(data.targets.slice(s![lo..hi, ..]));
            let r = tape.sub(pred, t);
            let sq = tape.powi(r, 2);
            let sq = match &data.component_weights {
                Some(w) => {
                    let w = tape.constant(Array2::from_shape_vec((1, d), w.clone()).expect("row"));
                    tape.mul(sq, w)
                }
                None => sq,
            };
            let total = tape.sum(sq);
            tape.scale(total, 1.0 / n)
        }
        LossKind::Elbo(_) => {
            let y = slices.forward_tape(tape, x);
            let total = tape.sum(y);
            tape.scale(total, -1.0 / n)
        }
    }
}

/// `log Z + kl_weight · KL(q ‖ uniform)` on the trapezoid grid.
fn grid_objective(tape: &mut Tape<'_>, slices: &ModelSlices, spec: &ElboSpec) -> Var {
    let g = spec.n_grid;
    let x = tape.constant(Array2::from_shape_vec((g, 1), spec.abscissae()).expect("column"));
    let w = spec.weights();
    let logw = tape.constant(Array2::from_shape_vec((g, 1), w.iter().map(|v| v.ln()).collect()).expect("column"));
    let l = slices.forward_tape(tape, x);
    let lw = tape.add(l, logw);
    let lw = tape.transpose(lw);
    let log_z = tape.logsumexp_rows(lw);
    if spec.kl_weight == 0.0 {
        return log_z;
    }
    let log_q = tape.sub(l, log_z);
    let q = tape.exp(log_q);
    let wq = tape.constant(Array2::from_shape_vec((g, 1), w).expect("column"));
    let wq = tape.mul(wq, q);
    let integrand = tape.mul(wq, log_q);
    let neg_entropy = tape.sum(integrand);
    let kl = tape.shift(neg_entropy, (spec.hi - spec.lo).ln());
    let kl = tape.scale(kl, spec.kl_weight);
    tape.add(log_z, kl)
}

/// Maps `f` over `items`, on the rayon pool when `mode` is parallel.
/// Results keep input order either way.
pub fn par_map<T, R, F>(items: &[T], mode: ExecMode, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel if items.len() > 1 => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

fn fused_rows(store: &ParamStore, slices: &ModelSlices, data: &Dataset, kind: &LossKind, lo: usize, hi: usize) -> (f64, Vec<f64>) {
    let n = data.len() as f64;
    let x = data.inputs.slice(s![lo..hi, ..]);
    let cache = fused::lse_forward(store, slices, x);
    let mut grad = store.zeros_like();
    let value = match kind {
        LossKind::Value => {
            let res = &cache.value - &data.targets.slice(s![lo..hi, 0]);
            let c = res.mapv(|v| 2.0 * v / n);
            fused::lse_value_backward(store, slices, x, &cache, c.view(), &mut grad);
            res.mapv(|v| v * v).sum() / n
        }
        LossKind::Gradient => {
            let (g, per_mode) = fused::lse_input_gradient(store, slices, &cache, hi - lo);
            let mut res = g - data.targets.slice(s![lo..hi, ..]);
            let mut sq = res.mapv(|v| v * v);
            if let Some(w) = &data.component_weights {
                let w = ArrayView1::from(w.as_slice());
                sq *= &w;
                res *= &w;
            }
            res.mapv_inplace(|v| 2.0 * v / n);
            fused::lse_directional_backward(store, slices, x, &cache, &per_mode, res.view(), &mut grad);
            sq.sum() / n
        }
        LossKind::Elbo(_) => {
            let c = Array1::from_elem(hi - lo, -1.0 / n);
            fused::lse_value_backward(store, slices, x, &cache, c.view(), &mut grad);
            -cache.value.sum() / n
        }
    };
    (value, grad)
}

fn fused_grid(store: &ParamStore, slices: &ModelSlices, spec: &ElboSpec) -> (f64, Vec<f64>) {
    let x = Array2::from_shape_vec((spec.n_grid, 1), spec.abscissae()).expect("column");
    let cache = fused::lse_forward(store, slices, x.view());
    let w = spec.weights();
    let l = &cache.value;
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + w.iter().zip(l).map(|(wk, lk)| wk * (lk - m).exp()).sum::<f64>().ln();
    // p_k = w_k q_k is both ∂ log Z/∂L_k and the quadrature mass of node k.
    let p: Vec<f64> = w.iter().zip(l).map(|(wk, lk)| wk * (lk - log_z).exp()).collect();
    let kl_raw: f64 = p.iter().zip(l).map(|(pk, lk)| pk * (lk - log_z)).sum();
    let c: Array1<f64> = p.iter().zip(l).map(|(pk, lk)| pk + spec.kl_weight * pk * (lk - log_z - kl_raw)).collect();
    let mut grad = store.zeros_like();
    fused::lse_value_backward(store, slices, x.view(), &cache, c.view(), &mut grad);
    let value = if spec.kl_weight == 0.0 { log_z } else { log_z + spec.kl_weight * (kl_raw + (spec.hi - spec.lo).ln()) };
    (value, grad)
}

fn jobs_for(data: &Dataset, kind: &LossKind) -> Vec<Job> {
    let mut jobs: Vec<Job> = (0..data.len()).step_by(CHUNK_ROWS).map(|lo| Job::Rows(lo, (lo + CHUNK_ROWS).min(data.len()))).collect();
    if matches!(kind, LossKind::Elbo(_)) {
        jobs.push(Job::Grid);
    }
    jobs
}

fn assemble(store: &ParamStore, slices: &ModelSlices, parts: Vec<Result<(f64, Vec<f64>), AutodiffError>>, penalty: Penalty) -> Result<LossEval, AutodiffError> {
    let mut data_term = 0.0;
    let mut grad = store.zeros_like();
    for part in parts {
        let (v, g) = part?;
        data_term += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    if !data_term.is_finite() {
        return Err(AutodiffError::NonFinite);
    }
    let mut l1_term = 0.0;
    for i in store.slice(slices.alpha).range() {
        let a = store.values()[i];
        let (p, dp) = penalty.on.eval(a);
        l1_term += penalty.epsilon * p;
        grad[i] += penalty.epsilon * dp;
    }
    Ok(LossEval { total: data_term + l1_term, data_term, l1_term, grad })
}

/// Loss and full parameter gradient at the parameters held in `store`.
pub fn loss_and_grad(
    store: &ParamStore,
    slices: &ModelSlices,
    data: &Dataset,
    kind: &LossKind,
    penalty: Penalty,
    mode: ExecMode,
) -> Result<LossEval, AutodiffError> {
    if slices.rho(store) <= 0.0 {
        return Err(AutodiffError::Domain { op: "div", value: slices.rho(store) });
    }
    let parts = par_map(&jobs_for(data, kind), mode, |job| {
        Ok(match (job, kind) {
            (Job::Rows(lo, hi), _) => fused_rows(store, slices, data, kind, *lo, *hi),
            (Job::Grid, LossKind::Elbo(spec)) => fused_grid(store, slices, spec),
            (Job::Grid, _) => unreachable!("grid job only for density losses"),
        })
    });
    assemble(store, slices, parts, penalty)
}

/// Same as [`loss_and_grad`] but built on the generic tape. Slower; kept as
/// the reference the fused path is checked against.
pub fn loss_and_grad_taped(
    store: &ParamStore,
    slices: &ModelSlices,
    data: &Dataset,
    kind: &LossKind,
    penalty: Penalty,
    mode: ExecMode,
) -> Result<LossEval, AutodiffError> {
    let parts = par_map(&jobs_for(data, kind), mode, |job| {
        let mut tape = Tape::new(store);
        let out = match (job, kind) {
            (Job::Rows(lo, hi), _) => rows_objective(&mut tape, slices, data, kind, *lo, *hi),
            (Job::Grid, LossKind::Elbo(spec)) => grid_objective(&mut tape, slices, spec),
            (Job::Grid, _) => unreachable!("grid job only for density losses"),
        };
        tape.backward(out)
    });
    assemble(store, slices, parts, penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected ADAM update. `α` and `rho_raw` use `lr_gate_scale`,
/// everything else `lr_network`; hidden weights are then clamped at zero.
pub fn adam_step(store: &mut ParamStore, slices: &ModelSlices, grad: &[f64], state: &mut AdamState, config: &TrainConfig) {
    assert_eq!(grad.len(), store.len(), "gradient length");
    assert_eq!(state.m.len(), store.len(), "optimizer state length");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut lr = vec![config.lr_network; store.len()];
    for id in [slices.alpha, slices.rho_raw] {
        lr[store.slice(id).range()].iter_mut().for_each(|v| *v = config.lr_gate_scale);
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, p) in store.values_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        *p -= lr[i] * mh / (vh.sqrt() + eps);
    }
    for id in slices.hidden_weights().collect::<Vec<_>>() {
        store.get_mut(id).iter_mut().for_each(|w| *w = w.max(0.0));
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Loss evaluated before each update.
    pub loss: Vec<f64>,
    pub data_term: Vec<f64>,
    pub l1_term: Vec<f64>,
    /// Scale, gates and active count after each update.
    pub rho: Vec<f64>,
    pub gates: Vec<Vec<f64>>,
    pub active_modes: Vec<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        let n_modes = self.gates.first().map_or(0, |g| g.len());
        let mut out = String::from("epoch,loss,data_term,l1_term,rho,active_modes");
        for i in 0..n_modes {
            let _ = write!(out, ",gate_{i}");
        }
        out.push('\n');
        for e in 0..self.len() {
            let _ = write!(
                out,
                "{},{:e},{:e},{:e},{:e},{}",
                e + 1,
                self.loss[e],
                self.data_term[e],
                self.l1_term[e],
                self.rho[e],
                self.active_modes[e]
            );
            for g in &self.gates[e] {
                let _ = write!(out, ",{g:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv_string())
    }
}

/// Trains `model` in place for `config.epochs` full-batch ADAM steps.
pub fn train(model: &mut LseModel, data: &Dataset, config: &TrainConfig) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    data.check(&config.loss_kind, model.input_dim())?;
    let (mut store, slices) = model.to_store();
    let mut state = AdamState::new(store.len());
    let mut hist = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let eval = loss_and_grad(&store, &slices, data, &config.loss_kind, config.penalty(), config.exec)
            .map_err(|source| numerical(epoch, &store, None, source))?;
        if let Some(i) = eval.grad.iter().position(|g| !g.is_finite()) {
            return Err(numerical(epoch, &store, Some(i), AutodiffError::NonFinite));
        }
        adam_step(&mut store, &slices, &eval.grad, &mut state, config);

        let gates: Vec<f64> = store.get(slices.alpha).iter().map(|&a| gate(a)).collect();
        hist.loss.push(eval.total);
        hist.data_term.push(eval.data_term);
        hist.l1_term.push(eval.l1_term);
        hist.rho.push(slices.rho(&store));
        hist.active_modes.push(gates.iter().filter(|&&g| g > ACTIVE_THRESHOLD).count());
        hist.gates.push(gates);
    }
    *model = LseModel::from_store(&store, &slices);
    Ok(hist)
}

fn numerical(epoch: usize, store: &ParamStore, index: Option<usize>, source: AutodiffError) -> TrainError {
    let slice = index
        .and_then(|i| store.slice_of(i))
        .or_else(|| store.values().iter().position(|v| !v.is_finite()).and_then(|i| store.slice_of(i)))
        .map_or_else(|| "unknown".to_string(), |s| s.name.clone());
    TrainError::Numerical { epoch, slice, source }
}

/// Mean squared error of `pred` against `truth`.
pub fn mse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(pred.shape(), truth.shape());
    let n = pred.len() as f64;
    pred.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param_gradient_check;
    use crate::icnn::{IcnnConfig, IcnnParams};
    use crate::mixture::{rho_raw_for, ModelConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize, n_modes: usize, seed: u64) -> LseModel {
        LseModel::new(ModelConfig { input_dim: d, n_modes, n_hidden_layers: 2, hidden_width: 5 }, seed).unwrap()
    }

    fn random_data(n: usize, d: usize, t: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5));
        let y = Array2::from_shape_fn((n, t), |_| rng.gen_range(-1.0..1.0));
        Dataset::new(x, y).unwrap()
    }

    fn check_loss_gradient(m: &LseModel, data: &Dataset, kind: LossKind) {
        let (store, slices) = m.to_store();
        let eval = loss_and_grad(&store, &slices, data, &kind, Penalty::l1(1e-4), ExecMode::Sequential).unwrap();
        let objective = |p: &[f64]| {
            let mut s = store.clone();
            s.values_mut().copy_from_slice(p);
            loss_and_grad(&s, &slices, data, &kind, Penalty::l1(1e-4), ExecMode::Sequential).unwrap().total
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut idx: Vec<usize> = (0..20).map(|_| rng.gen_range(0..store.len())).collect();
        idx.extend(store.slice(slices.alpha).range());
        idx.extend(store.slice(slices.rho_raw).range());
        let r = param_gradient_check(objective, store.values(), &eval.grad, &idx, 1e-5);
        assert!(r.max_rel_error <= 1e-5, "{kind:?}: {r:?} ({})", store.slice_of(r.worst_index).unwrap().name);
    }

    #[test]
    fn gate_penalty_slope_matches_fd() {
        for on in [GatePenalty::Alpha, GatePenalty::Gate] {
            for a in [-3.0, -0.4, 0.7, 2.0, 2.919] {
                let h = 1e-6;
                let numeric = (on.eval(a + h).0 - on.eval(a - h).0) / (2.0 * h);
                assert!((on.eval(a).1 - numeric).abs() < 1e-8, "{on:?} at {a}");
            }
        }
        assert_eq!(GatePenalty::Alpha.eval(0.0), (0.0, 0.0));
        assert!((GatePenalty::Gate.eval(0.0).0 - 4.5398e-5).abs() < 1e-9);
    }

    #[test]
    fn value_loss_gradient_matches_fd() {
        check_loss_gradient(&model(1, 3, 0), &random_data(40, 1, 1, 1), LossKind::Value);
    }

    #[test]
    fn gradient_loss_gradient_matches_fd() {
        check_loss_gradient(&model(3, 2, 1), &random_data(30, 3, 3, 2), LossKind::Gradient);
        let masked = random_data(30, 2, 2, 3).with_component_weights(vec![1.0, 0.0]).unwrap();
        check_loss_gradient(&model(2, 2, 4), &masked, LossKind::Gradient);
    }

    #[test]
    fn elbo_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let spec = ElboSpec { lo: 0.0, hi: 1.2, n_grid: 64, kl_weight: 0.3 };
        check_loss_gradient(&model(1, 3, 2), &Dataset::samples(&samples).unwrap(), LossKind::Elbo(spec));
    }

    #[test]
    fn fused_matches_taped_for_every_loss() {
        let spec = ElboSpec { lo: -1.5, hi: 1.5, n_grid: 40, kl_weight: 0.2 };
        let cases = [
            (model(1, 3, 20), random_data(300, 1, 1, 21), LossKind::Value),
            (model(3, 2, 22), random_data(300, 3, 3, 23).with_component_weights(vec![1.0, 0.5, 0.0]).unwrap(), LossKind::Gradient),
            (model(1, 3, 24), random_data(300, 1, 0, 25), LossKind::Elbo(spec)),
        ];
        for (m, data, kind) in cases {
            let (store, slices) = m.to_store();
            let a = loss_and_grad(&store, &slices, &data, &kind, Penalty::l1(1e-4), ExecMode::Sequential).unwrap();
            let b = loss_and_grad_taped(&store, &slices, &data, &kind, Penalty::l1(1e-4), ExecMode::Sequential).unwrap();
            assert!((a.total - b.total).abs() < 1e-12 * (1.0 + b.total.abs()), "{kind:?}");
            for (x, y) in a.grad.iter().zip(&b.grad) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{kind:?}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn value_loss_examples() {
        let zero = IcnnParams::zeros(IcnnConfig::new(1, 1, 2));
        let m = LseModel::from_parts(vec![zero], vec![1e3], rho_raw_for(2.0)).unwrap();
        let (store, slices) = m.to_store();
        let data = Dataset::new(array![[0.1], [0.5], [-2.0]], array![[1.0], [1.0], [1.0]]).unwrap();
        let e = loss_and_grad(&store, &slices, &data, &LossKind::Value, Penalty::l1(0.0), ExecMode::Sequential).unwrap();
        assert!((e.total - 1.0).abs() < 1e-12);

        let m = model(1, 2, 3);
        let (store, slices) = m.to_store();
        let x = array![[0.1], [0.7]];
        let y = x.map_axis(ndarray::Axis(1), |r| m.forward(&[r[0]]).unwrap()).insert_axis(ndarray::Axis(1));
        let data = Dataset::new(x, y).unwrap();
        let e = loss_and_grad(&store, &slices, &data, &LossKind::Value, Penalty::l1(1e-4), ExecMode::Sequential).unwrap();
        let l1: f64 = m.alpha.iter().map(|a| 1e-4 * a.abs()).sum();
        assert!(e.data_term.abs() < 1e-28);
        assert!((e.total - l1).abs() < 1e-15);
    }

    #[test]
    fn gradient_loss_zero_on_own_gradients() {
        let m = model(2, 3, 6);
        let (store, slices) = m.to_store();
        let x = array![[0.1, 0.3], [-0.7, 1.1], [0.0, 0.0]];
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| m.input_gradient(&r.to_vec()).unwrap()).collect();
        let y = Array2::from_shape_fn((3, 2), |(i, j)| rows[i][j]);
        let data = Dataset::new(x, y).unwrap();
        let e = loss_and_grad(&store, &slices, &data, &LossKind::Gradient, Penalty::l1(0.0), ExecMode::Sequential).unwrap();
        assert!(e.data_term < 1e-28, "{}", e.data_term);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let m = model(1, 2, 8);
        let (mut store, slices) = m.to_store();
        let before = store.clone();
        let cfg = TrainConfig::full_protocol(LossKind::Value, 0);
        let mut st = AdamState::new(store.len());
        let zeros = store.zeros_like();
        adam_step(&mut store, &slices, &zeros, &mut st, &cfg);
        assert_eq!(st.t, 1);
        assert_eq!(store, before);

        let mut st = AdamState::new(store.len());
        let g: Vec<f64> = (0..store.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        adam_step(&mut store, &slices, &g, &mut st, &cfg);
        let alpha = store.slice(slices.alpha).range();
        for (i, gi) in g.iter().enumerate() {
            let lr = if alpha.contains(&i) || store.slice(slices.rho_raw).range().contains(&i) { 1e-4 } else { 1e-3 };
            let d = store.values()[i] - before.values()[i];
            let hidden = slices.hidden_weights().any(|id| store.slice(id).range().contains(&i));
            if hidden && store.values()[i] == 0.0 {
                continue;
            }
            assert!((d + lr * gi.signum()).abs() < lr * 1e-6, "index {i}: {d}");
        }
    }

    #[test]
    fn adam_projects_hidden_weights() {
        let m = model(1, 1, 9);
        let (mut store, slices) = m.to_store();
        let w = slices.hidden_weights().next().unwrap();
        let i = store.slice(w).offset;
        store.values_mut()[i] = 5e-4;
        let mut g = store.zeros_like();
        g[i] = 1.0;
        let mut st = AdamState::new(store.len());
        adam_step(&mut store, &slices, &g, &mut st, &TrainConfig::full_protocol(LossKind::Value, 0));
        assert_eq!(store.values()[i], 0.0);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let m = model(2, 3, 10);
        let (store, slices) = m.to_store();
        let data = random_data(700, 2, 2, 11);
        let a = loss_and_grad(&store, &slices, &data, &LossKind::Gradient, Penalty::l1(1e-4), ExecMode::Sequential).unwrap();
        let b = loss_and_grad(&store, &slices, &data, &LossKind::Gradient, Penalty::l1(1e-4), ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let teacher = model(1, 2, 12);
        let xs: Vec<f64> = (0..50).map(|i| -2.0 + 0.08 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| teacher.forward(&[x]).unwrap()).collect();
        let data = Dataset::new(Array2::from_shape_vec((50, 1), xs).unwrap(), Array2::from_shape_vec((50, 1), ys).unwrap()).unwrap();
        let mut cfg = TrainConfig::full_protocol(LossKind::Value, 0);
        cfg.epochs = 100;
        cfg.l1_epsilon = 0.0;
        let mut m1 = model(1, 2, 13);
        let h1 = train(&mut m1, &data, &cfg).unwrap();
        let mut m2 = model(1, 2, 13);
        let h2 = train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 100);
        assert!(h1.loss[99] < h1.loss[0]);
        assert_eq!(*h1.active_modes.last().unwrap(), m1.active_mode_count(ACTIVE_THRESHOLD));
        assert!(m1.modes.iter().all(|p| p.is_projected()));
    }

    #[test]
    fn history_csv_header() {
        let mut m = model(1, 3, 1);
        let data = random_data(10, 1, 1, 1);
        let mut cfg = TrainConfig::full_protocol(LossKind::Value, 0);
        cfg.epochs = 2;
        let h = train(&mut m, &data, &cfg).unwrap();
        let csv = h.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,data_term,l1_term,rho,active_modes,gate_0,gate_1,gate_2");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut m = model(1, 2, 0);
        let mut cfg = TrainConfig::full_protocol(LossKind::Value, 0);
        cfg.epochs = 0;
        assert!(matches!(train(&mut m, &random_data(5, 1, 1, 0), &cfg), Err(TrainError::Config(_))));
        cfg.epochs = 1;
        assert!(matches!(train(&mut m, &random_data(5, 2, 1, 0), &cfg), Err(TrainError::Data(_))));
        let spec = ElboSpec { lo: 0.0, hi: 1.0, n_grid: 16, kl_weight: 0.0 };
        cfg.loss_kind = LossKind::Elbo(spec);
        let err = train(&mut m, &Dataset::samples(&[0.5, 1.5]).unwrap(), &cfg).unwrap_err();
        assert!(err.to_string().contains("outside grid support"), "{err}");
        assert!(Dataset::new(array![[1.0]], array![[1.0], [2.0]]).is_err());
        assert!(Dataset::new(array![[f64::NAN]], array![[1.0]]).is_err());
    }

    #[test]
    fn numerical_failure_names_epoch() {
        let mut m = model(1, 1, 0);
        m.rho_raw = -800.0;
        let data = random_data(5, 1, 1, 0);
        let mut cfg = TrainConfig::full_protocol(LossKind::Value, 0);
        cfg.epochs = 3;
        match train(&mut m, &data, &cfg) {
            Err(TrainError::Numerical { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }
}
