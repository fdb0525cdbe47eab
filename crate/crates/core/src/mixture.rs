//! Gated log-sum-exponential mixture of ICNN modes:
//!
//! ```text
//! LSE(x) = −(1/ρ) · log( (1/N) Σᵢ ς(αᵢ) · exp(−ρ fᵢ(x)) )
//! ```
//!
//! evaluated in the exponent-shift form `exp(−ρ fᵢ + log ς(αᵢ))` with the
//! max-subtraction trick, so large `ρ` never underflows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, ParamStore, Real, ScalarField, SliceId, Tape, Var};
use crate::icnn::{IcnnConfig, IcnnParams, IcnnSlices, Tangent};
use crate::ModelError;

/// Gate threshold below which a mode counts as inactive.
pub const ACTIVE_THRESHOLD: f64 = 1e-6;

/// `α` such that `ς(α) = 0.99`, i.e. `2(1 + ln(99)/10)`.
pub fn alpha_for_gate(gate_value: f64) -> f64 {
    2.0 * (1.0 + (gate_value / (1.0 - gate_value)).ln() / 10.0)
}

/// Raw parameter giving `ρ = softplus(raw) = rho`.
pub fn rho_raw_for(rho: f64) -> f64 {
    rho + (-(-rho).exp_m1()).ln()
}

/// Shifted and scaled sigmoid `ς(a) = sigmoid(10(a/2 − 1))`.
pub fn gate(a: f64) -> f64 {
    crate::autodiff::sigmoid(10.0 * (a / 2.0 - 1.0))
}

/// `log ς(a)`, stable for very negative `a`.
pub fn log_gate(a: f64) -> f64 {
    -softplus(-10.0 * (a / 2.0 - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub n_modes: usize,
    pub n_hidden_layers: usize,
    pub hidden_width: usize,
}

impl ModelConfig {
    pub fn icnn(&self) -> IcnnConfig {
        IcnnConfig::new(self.input_dim, self.n_hidden_layers, self.hidden_width)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_modes == 0 {
            return Err(ModelError::Config("n_modes must be >= 1".into()));
        }
        self.icnn().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LseModel {
    pub modes: Vec<IcnnParams>,
    pub alpha: Vec<f64>,
    /// Unconstrained scale parameter, `ρ = softplus(rho_raw)`.
    pub rho_raw: f64,
}

impl LseModel {
    /// Fresh model with `ς(αᵢ) = 0.99` and `ρ = 2`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = (0..config.n_modes).map(|_| IcnnParams::init(config.icnn(), &mut rng)).collect();
        Ok(Self {
            modes,
            alpha: vec![alpha_for_gate(0.99); config.n_modes],
            rho_raw: rho_raw_for(2.0),
        })
    }

    pub fn from_parts(modes: Vec<IcnnParams>, alpha: Vec<f64>, rho_raw: f64) -> Result<Self, ModelError> {
        if modes.is_empty() || modes.len() != alpha.len() {
            return Err(ModelError::Config(format!("{} modes but {} gate weights", modes.len(), alpha.len())));
        }
        let d = modes[0].input_dim();
        if let Some(m) = modes.iter().find(|m| m.input_dim() != d) {
            return Err(ModelError::Dimension { expected: d, got: m.input_dim() });
        }
        Ok(Self { modes, alpha, rho_raw })
    }

    pub fn config(&self) -> ModelConfig {
        let c = self.modes[0].config;
        ModelConfig {
            input_dim: c.input_dim,
            n_modes: self.modes.len(),
            n_hidden_layers: c.n_hidden_layers,
            hidden_width: c.hidden_width,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.modes[0].input_dim()
    }

    pub fn rho(&self) -> f64 {
        softplus(self.rho_raw)
    }

    pub fn gates(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| gate(a)).collect()
    }

    pub fn active_mode_count(&self, threshold: f64) -> usize {
        assert!(threshold > 0.0, "threshold must be positive");
        self.alpha.iter().filter(|&&a| gate(a) > threshold).count()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    /// Per-mode outputs `fᵢ(x)`.
    pub fn mode_values(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        Ok(self.modes.iter().map(|m| m.eval(x)).collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        Ok(self.eval(x))
    }

    /// Soft-min responsibilities `wᵢ ∝ ς(αᵢ) exp(−ρ fᵢ)`, summing to one.
    pub fn membership_weights(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let f = self.mode_values(x)?;
        Ok(self.weights_from_modes(&f))
    }

    fn weights_from_modes(&self, f: &[f64]) -> Vec<f64> {
        let rho = self.rho();
        let e: Vec<f64> = f.iter().zip(&self.alpha).map(|(&fi, &a)| -rho * fi + log_gate(a)).collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = p.iter().sum();
        p.into_iter().map(|v| v / s).collect()
    }

    /// `∇LSE(x) = Σᵢ wᵢ ∇fᵢ(x)`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let w = self.membership_weights(x)?;
        let mut g = vec![0.0; x.len()];
        for (mode, wi) in self.modes.iter().zip(w) {
            for (gj, mj) in g.iter_mut().zip(mode.input_gradient(x)?) {
                *gj += wi * mj;
            }
        }
        Ok(g)
    }

    /// Writes every trainable scalar into a fresh store.
    pub fn to_store(&self) -> (ParamStore, ModelSlices) {
        let mut store = ParamStore::new();
        let modes = self
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| m.push_into(&mut store, &format!("mode{i}")))
            .collect();
        let alpha = store.push("alpha", 1, self.alpha.len(), &self.alpha);
        let rho_raw = store.push("rho_raw", 1, 1, &[self.rho_raw]);
        (store, ModelSlices { config: self.config(), modes, alpha, rho_raw })
    }

    pub fn from_store(store: &ParamStore, slices: &ModelSlices) -> Self {
        let icnn = slices.config.icnn();
        Self {
            modes: slices.modes.iter().map(|s| IcnnParams::from_store(icnn, store, s)).collect(),
            alpha: store.get(slices.alpha).to_vec(),
            rho_raw: store.get(slices.rho_raw)[0],
        }
    }
}

impl ScalarField for LseModel {
    fn input_dim(&self) -> usize {
        self.modes[0].input_dim()
    }

    fn eval<T: Real>(&self, x: &[T]) -> T {
        let rho = self.rho();
        let exps: Vec<T> = self
            .modes
            .iter()
            .zip(&self.alpha)
            .map(|(m, &a)| m.eval(x) * (-rho) + log_gate(a))
            .collect();
        let max = exps.iter().map(|e| e.value()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = T::constant(0.0);
        for e in exps {
            sum += (e - max).exp();
        }
        let log_mean = sum.ln() + max - (self.modes.len() as f64).ln();
        -log_mean / rho
    }
}

/// Where each part of an [`LseModel`] lives inside its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSlices {
    pub config: ModelConfig,
    pub modes: Vec<IcnnSlices>,
    pub alpha: SliceId,
    pub rho_raw: SliceId,
}

/// Output of a batched tape evaluation.
pub struct TapeEval {
    pub value: Var,
    pub tangents: Vec<Var>,
    pub rho: Var,
}

impl ModelSlices {
    pub fn hidden_weights(&self) -> impl Iterator<Item = SliceId> + '_ {
        self.modes.iter().flat_map(|m| m.hidden_weights())
    }

    pub fn rho(&self, store: &ParamStore) -> f64 {
        softplus(store.get(self.rho_raw)[0])
    }

    pub fn gates(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.alpha).iter().map(|&a| gate(a)).collect()
    }

    /// `x: n × d → n × 1`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        self.forward_tape_with_tangents(tape, x, &[]).value
    }

    /// Batched LSE plus the directional derivatives `∇LSE · t` for each
    /// tangent, built as differentiable nodes.
    pub fn forward_tape_with_tangents(&self, tape: &mut Tape<'_>, x: Var, tangents: &[Tangent]) -> TapeEval {
        let n_modes = self.modes.len();
        let mut values = Vec::with_capacity(n_modes);
        let mut mode_tangents: Vec<Vec<Var>> = vec![Vec::with_capacity(n_modes); tangents.len()];
        for m in &self.modes {
            let (y, ts) = m.forward_tape_with_tangents(tape, x, tangents);
            values.push(y);
            for (slot, t) in mode_tangents.iter_mut().zip(ts) {
                slot.push(t);
            }
        }
        let f = tape.concat_cols(&values);

        let raw = tape.param(self.rho_raw);
        let rho = tape.softplus(raw);
        let alpha = tape.param(self.alpha);
        let z = tape.scale(alpha, 5.0);
        let z = tape.shift(z, -10.0);
        let nz = tape.neg(z);
        let sp = tape.softplus(nz);
        let log_gates = tape.neg(sp);

        let rf = tape.mul(f, rho);
        let e = tape.sub(log_gates, rf);
        let lse = tape.logsumexp_rows(e);
        let shifted = tape.shift(lse, -(n_modes as f64).ln());
        let neg = tape.neg(shifted);
        let value = tape.div(neg, rho);

        let tangents = if tangents.is_empty() {
            Vec::new()
        } else {
            let w = tape.softmax_rows(e);
            mode_tangents
                .iter()
                .map(|ts| {
                    let t = tape.concat_cols(ts);
                    let wt = tape.mul(w, t);
                    tape.row_sum(wt)
                })
                .collect()
        };
        TapeEval { value, tangents, rho }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{dual_gradient, relative_error};
    use ndarray::Array2;

    fn cfg(d: usize, n: usize) -> ModelConfig {
        ModelConfig { input_dim: d, n_modes: n, n_hidden_layers: 2, hidden_width: 6 }
    }

    #[test]
    fn gate_values() {
        assert_eq!(gate(2.0), 0.5);
        assert!((gate(0.0) - 4.5397868702434395e-5).abs() < 1e-18);
        let a = alpha_for_gate(0.99);
        assert!((a - 2.0 * (1.0 + 99f64.ln() / 10.0)).abs() < 1e-15);
        assert!((a - 2.9190).abs() < 1e-4);
        assert!((gate(a) - 0.99).abs() < 1e-14);
        assert!((log_gate(-50.0) - gate(-50.0).ln()).abs() < 1e-9);
        assert!(log_gate(-1e4).is_finite());
    }

    #[test]
    fn gate_bounded_and_increasing() {
        let mut prev = 0.0;
        for i in -300..=300 {
            let a = i as f64 * 0.01;
            let g = gate(a);
            assert!(g > 0.0 && g < 1.0);
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn rho_raw_inverts_softplus() {
        for rho in [1e-3, 0.5, 2.0, 40.0, 1000.0] {
            assert!(relative_error(softplus(rho_raw_for(rho)), rho) < 1e-12);
        }
    }

    #[test]
    fn initial_scale_is_two() {
        let m = LseModel::new(cfg(1, 3), 0).unwrap();
        assert!((m.rho() - 2.0).abs() < 1e-15);
        assert_eq!(m.active_mode_count(ACTIVE_THRESHOLD), 3);
    }

    #[test]
    fn active_count_examples() {
        let mut m = LseModel::new(cfg(1, 4), 0).unwrap();
        m.alpha[1] = -5.0;
        assert!(gate(-5.0) < 1e-6 && (gate(-5.0) - (-35f64).exp()).abs() < 1e-18);
        assert_eq!(m.active_mode_count(ACTIVE_THRESHOLD), 3);
        assert_eq!(m.active_mode_count(2.0), 0);
    }

    /// Single mode with gate → 1: exact identity with that mode.
    #[test]
    fn single_mode_with_unit_gate_is_identity() {
        let mut m = LseModel::new(cfg(2, 1), 3).unwrap();
        m.alpha[0] = 1e3;
        let x = [0.4, -1.2];
        assert!((m.forward(&x).unwrap() - m.modes[0].forward(&x).unwrap()).abs() < 1e-13);
        let g = m.input_gradient(&x).unwrap();
        let gm = m.modes[0].input_gradient(&x).unwrap();
        assert!(g.iter().zip(&gm).all(|(a, b)| (a - b).abs() < 1e-13));
    }

    fn constant_mode(c: f64) -> IcnnParams {
        let mut p = IcnnParams::zeros(IcnnConfig::new(1, 1, 2));
        p.layers[1].b[0] = c;
        p
    }

    #[test]
    fn equal_modes_give_that_value() {
        let m = LseModel::from_parts(vec![constant_mode(0.7); 3], vec![1e3; 3], rho_raw_for(5.0)).unwrap();
        assert!((m.forward(&[0.3]).unwrap() - 0.7).abs() < 1e-14);
        let w = m.membership_weights(&[0.3]).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_mode_reference_values() {
        let m = LseModel::from_parts(vec![constant_mode(0.0), constant_mode(1.0)], vec![1e3; 2], rho_raw_for(2.0)).unwrap();
        let expected = -0.5 * (0.5 * (1.0 + (-2f64).exp())).ln();
        assert!((m.forward(&[0.0]).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.2831096).abs() < 1e-6);
        let w = m.membership_weights(&[0.0]).unwrap();
        assert!((w[0] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!((w[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn large_scale_concentrates_weights() {
        let m = LseModel::from_parts(vec![constant_mode(0.0), constant_mode(1.0), constant_mode(0.3)], vec![alpha_for_gate(0.99); 3], rho_raw_for(1000.0))
            .unwrap();
        let w = m.membership_weights(&[0.0]).unwrap();
        assert!(w.iter().copied().fold(0.0, f64::max) > 1.0 - 1e-6);
        assert!(m.forward(&[0.0]).unwrap().is_finite());
    }

    #[test]
    fn mirrored_modes_have_zero_gradient_at_symmetry_point() {
        let mut a = IcnnParams::zeros(IcnnConfig::new(1, 1, 1));
        a.layers[0].v[[0, 0]] = 2.0;
        a.layers[0].b[0] = -1.0;
        a.layers[1].w = Some(ndarray::array![[1.5]]);
        let mut b = a.clone();
        b.layers[0].v[[0, 0]] = -2.0;
        let m = LseModel::from_parts(vec![a, b], vec![2.9; 2], rho_raw_for(3.0)).unwrap();
        assert!(m.input_gradient(&[0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn input_gradient_matches_dual_numbers() {
        for seed in 0..10 {
            let m = LseModel::new(cfg(3, 4), seed).unwrap();
            let x = [0.3 * seed as f64 - 1.0, 0.5, -0.8];
            let g = m.input_gradient(&x).unwrap();
            let d = dual_gradient(&m, &x);
            for (a, b) in g.iter().zip(&d) {
                assert!(relative_error(*a, *b) <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tape_matches_pointwise_route() {
        let m = LseModel::new(cfg(2, 3), 4).unwrap();
        let (store, slices) = m.to_store();
        assert_eq!(LseModel::from_store(&store, &slices), m);
        let xs = Array2::from_shape_vec((4, 2), vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(xs.clone());
        let out = slices.forward_tape_with_tangents(&mut tape, x, &[Tangent::Coordinate(0), Tangent::Coordinate(1)]);
        for r in 0..4 {
            let xr = xs.row(r).to_vec();
            let g = m.input_gradient(&xr).unwrap();
            assert!((tape.value(out.value)[[r, 0]] - m.forward(&xr).unwrap()).abs() < 1e-13);
            assert!((tape.value(out.tangents[0])[[r, 0]] - g[0]).abs() < 1e-13);
            assert!((tape.value(out.tangents[1])[[r, 0]] - g[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn mismatched_parts_rejected() {
        let a = IcnnParams::zeros(IcnnConfig::new(1, 1, 2));
        let b = IcnnParams::zeros(IcnnConfig::new(2, 1, 2));
        assert!(LseModel::from_parts(vec![a.clone(), b], vec![1.0, 1.0], 0.0).is_err());
        assert!(LseModel::from_parts(vec![a], vec![1.0, 1.0], 0.0).is_err());
        assert!(LseModel::new(ModelConfig { input_dim: 1, n_modes: 0, n_hidden_layers: 1, hidden_width: 1 }, 0).is_err());
    }
}
