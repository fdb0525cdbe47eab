//! Ground-truth generators: 1D wells, the mechanochemical free energy,
//! Schlögl SSA, a two-gene circuit and a two-phase elastic material.
//!
//! Every generator is a pure function of its parameters and seed. Where
//! many independent trajectories are drawn, trajectory `i` uses
//! `ChaCha8Rng::seed_from_u64(seed)` switched to stream `i`, so the draws
//! do not depend on generation order.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{dual_gradient, Real, ScalarField};
use crate::training::Dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Invalid(msg.into()))
}

/// RNG for trajectory `index` under a master seed.
pub fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

// ---------------------------------------------------------------- wells

/// `0.4 (x⁴/4 − x² + x³/8)`.
pub fn well_double(x: f64) -> f64 {
    0.4 * (x.powi(4) / 4.0 - x * x + x.powi(3) / 8.0)
}

/// `(x² + 1.6 cos 4x + 1) / 20`.
pub fn well_modulated(x: f64) -> f64 {
    (x * x + 1.6 * (4.0 * x).cos() + 1.0) / 20.0
}

const MINMIX_CENTERS: [f64; 3] = [-1.0, 0.0, 2.0];
const MINMIX_SCALES: [f64; 3] = [12.0, 8.0, 4.0];
const MINMIX_OFFSETS: [f64; 3] = [2.0, -0.5, 1.0];

/// `minᵢ (aᵢ · 0.05 (x − xᵢ)² + bᵢ)`.
pub fn well_minmix(x: f64) -> f64 {
    (0..3)
        .map(|i| MINMIX_SCALES[i] * 0.05 * (x - MINMIX_CENTERS[i]).powi(2) + MINMIX_OFFSETS[i])
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Well {
    Double,
    Modulated,
    Minmix,
}

impl Well {
    pub const ALL: [Well; 3] = [Well::Double, Well::Modulated, Well::Minmix];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Well::Double => well_double(x),
            Well::Modulated => well_modulated(x),
            Well::Minmix => well_minmix(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Well::Double => "double",
            Well::Modulated => "modulated",
            Well::Minmix => "minmix",
        }
    }
}

/// Uniform training samples plus the equispaced reporting grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WellData {
    pub train: Dataset,
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
}

pub fn sample_1d_dataset(well: Well, n: usize, range: (f64, f64), seed: u64) -> Result<WellData, DataError> {
    if n == 0 {
        return invalid("need at least one sample");
    }
    let (lo, hi) = range;
    if !(hi > lo) {
        return invalid("empty sampling range");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| well.eval(x)).collect();
    let train = Dataset::new(
        Array2::from_shape_vec((n, 1), xs).expect("column"),
        Array2::from_shape_vec((n, 1), ys).expect("column"),
    )
    .map_err(|e| DataError::Invalid(e.to_string()))?;
    let grid_x = linspace(lo, hi, 200);
    let grid_y = grid_x.iter().map(|&x| well.eval(x)).collect();
    Ok(WellData { train, grid_x, grid_y })
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + h * i as f64 }).collect()
}

// ---------------------------------------------------------- mechchem

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrainState {
    /// Symmetric Lagrange strain.
    pub e: [[f64; 3]; 3],
    pub c: f64,
}

/// Index pairs of the independent strain components, in input order.
pub const VOIGT: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

impl StrainState {
    /// From `(E11, E22, E33, E12, E13, E23, c)`.
    pub fn from_inputs(x: &[f64; 7]) -> Self {
        let mut e = [[0.0; 3]; 3];
        for (k, &(i, j)) in VOIGT.iter().enumerate() {
            e[i][j] = x[k];
            e[j][i] = x[k];
        }
        Self { e, c: x[6] }
    }

    pub fn inputs(&self) -> [f64; 7] {
        let mut x = [0.0; 7];
        for (k, &(i, j)) in VOIGT.iter().enumerate() {
            x[k] = self.e[i][j];
        }
        x[6] = self.c;
        x
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for i in 0..3 {
            for j in 0..3 {
                if self.e[i][j] != self.e[j][i] {
                    return invalid("strain must be symmetric");
                }
            }
        }
        if !(0.0..=1.0).contains(&self.c) {
            return invalid(format!("concentration {} outside [0, 1]", self.c));
        }
        Ok(())
    }
}

/// The mechanochemical free energy over `(E11, E22, E33, E12, E13, E23, c)`,
/// every summand as printed in the source, including its groupings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechchemEnergy {
    pub d_c: f64,
    pub d_e: f64,
    pub s_e: f64,
}

impl Default for MechchemEnergy {
    fn default() -> Self {
        Self { d_c: 2.0, d_e: 0.1, s_e: 0.1 }
    }
}

impl ScalarField for MechchemEnergy {
    fn input_dim(&self) -> usize {
        7
    }

    fn eval<T: Real>(&self, x: &[T]) -> T {
        let (e11, e22, e33, e12, e13, e23, c) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6]);
        let (dc, de, se) = (self.d_c, self.d_e, self.s_e);
        let c2 = c * c;
        let chem = (c2 * 96.0 - c2 * c * 192.0 + c2 * c2 * 96.0) * dc;
        let cubic = (e11 + e22 - e33 * 2.0) * (e11 - e22 * 2.0 + e33) * (e11 * 2.0 - e22 - e33);
        let t2 = (c - 1.0) * cubic * (2.0 * (2.0f64 / 3.0).sqrt() * de / se.powi(3));
        let quad = e11 * e11 + e22 * e22 + e33 * e33 - e22 * e33 - e11 * e22 - e11 * e33;
        let t3 = (c * 2.0 - 1.0) * quad * (6.0 * de / (se * se));
        let s23 = e22 + e33;
        let quad4 = e11 * e11 + e22 * e22 + e33 * e33 - e22 * e33 - e11 * s23 * s23;
        let t4 = quad4 * (4.0 * de / se);
        let shear = (e12 * e12 + e13 * e13 + e23 * e23) * 6.0 + (e11 + e22 + e33 * e33);
        let t5 = shear * (de / (2.0 * se));
        chem + t2 + t3 + t4 + t5
    }
}

pub fn mechchem_energy(s: &StrainState) -> f64 {
    MechchemEnergy::default().eval(&s.inputs())
}

/// `∂Ψ/∂X` over the seven inputs; off-diagonal entries count both `E_ij` and `E_ji`.
pub fn mechchem_input_gradient(x: &[f64; 7]) -> [f64; 7] {
    let g = dual_gradient(&MechchemEnergy::default(), x);
    g.try_into().expect("seven components")
}

/// Symmetric stress `S = ∂Ψ/∂E` and chemical potential `μ = ∂Ψ/∂c`.
pub fn mechchem_gradients(s: &StrainState) -> ([[f64; 3]; 3], f64) {
    let g = mechchem_input_gradient(&s.inputs());
    let mut stress = [[0.0; 3]; 3];
    for (k, &(i, j)) in VOIGT.iter().enumerate() {
        let v = if i == j { g[k] } else { 0.5 * g[k] };
        stress[i][j] = v;
        stress[j][i] = v;
    }
    (stress, g[6])
}

/// Sampling box half-widths: diagonal strains, shear strains.
pub const MECHCHEM_DIAG_BOX: f64 = 0.15;
pub const MECHCHEM_SHEAR_BOX: f64 = 0.05;

/// Affine input map `u = (x − mean) / std` and target scale.
///
/// With `LSE(u) ≈ Ψ(x(u)) / psi_scale`, the chain rule gives training
/// targets `∂Ψ/∂x_k · std_k / psi_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub psi_scale: f64,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d], psi_scale: 1.0 }
    }

    pub fn fit(inputs: &Array2<f64>, raw_gradients: &Array2<f64>) -> Self {
        let n = inputs.nrows() as f64;
        let mean: Vec<f64> = inputs.columns().into_iter().map(|c| c.sum() / n).collect();
        let std: Vec<f64> = inputs
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let mut ss = 0.0;
        for row in raw_gradients.rows() {
            for (g, s) in row.iter().zip(&std) {
                ss += (g * s).powi(2);
            }
        }
        let rms = (ss / raw_gradients.len() as f64).sqrt();
        Self { mean, std, psi_scale: if rms > 0.0 { rms } else { 1.0 } }
    }

    pub fn normalize_inputs(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize_inputs(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn normalize_gradient(&self, g: &[f64]) -> Vec<f64> {
        g.iter().zip(&self.std).map(|(v, s)| v * s / self.psi_scale).collect()
    }

    pub fn denormalize_gradient(&self, g: &[f64]) -> Vec<f64> {
        g.iter().zip(&self.std).map(|(v, s)| v * self.psi_scale / s).collect()
    }

    pub fn normalize_matrix(&self, x: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(i, j)| (x[[i, j]] - self.mean[j]) / self.std[j])
    }

    pub fn normalize_gradient_matrix(&self, g: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(g.dim(), |(i, j)| g[[i, j]] * self.std[j] / self.psi_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechchemData {
    /// Raw `(E11, E22, E33, E12, E13, E23, c)` rows.
    pub inputs: Array2<f64>,
    /// Raw `∂Ψ/∂X` rows.
    pub gradients: Array2<f64>,
    pub energies: Vec<f64>,
    pub normalizer: Normalizer,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl MechchemData {
    /// Normalized training and test sets.
    pub fn datasets(&self) -> (Dataset, Dataset) {
        let x = self.normalizer.normalize_matrix(&self.inputs);
        let y = self.normalizer.normalize_gradient_matrix(&self.gradients);
        let all = Dataset::new(x, y).expect("generated data is finite");
        (all.subset(&self.train_idx), all.subset(&self.test_idx))
    }
}

/// `n` random states, 80/20 split; normalizers fitted on the training part.
pub fn mechchem_dataset(n: usize, seed: u64) -> Result<MechchemData, DataError> {
    if n < 10 {
        return invalid("mechchem dataset needs at least 10 samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::zeros((n, 7));
    let mut gradients = Array2::zeros((n, 7));
    let mut energies = Vec::with_capacity(n);
    let energy = MechchemEnergy::default();
    for r in 0..n {
        let mut x = [0.0; 7];
        for (k, v) in x.iter_mut().enumerate().take(6) {
            let h = if k < 3 { MECHCHEM_DIAG_BOX } else { MECHCHEM_SHEAR_BOX };
            *v = rng.gen_range(-h..=h);
        }
        x[6] = rng.gen_range(0.0..=1.0);
        let g = mechchem_input_gradient(&x);
        for k in 0..7 {
            inputs[[r, k]] = x[k];
            gradients[[r, k]] = g[k];
        }
        energies.push(energy.eval(&x));
    }
    let n_train = n * 4 / 5;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n).collect();
    let normalizer = Normalizer::fit(&inputs.select(ndarray::Axis(0), &train_idx), &gradients.select(ndarray::Axis(0), &train_idx));
    Ok(MechchemData { inputs, gradients, energies, normalizer, train_idx, test_idx })
}

/// `E(t) = 0.4 t (e₁⊗e₁ − 0.3 (I − e₁⊗e₁))`, `c(t) = t`.
pub fn mechchem_path(t: f64) -> Result<StrainState, DataError> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("path parameter {t} outside [0, 1]"));
    }
    let mut e = [[0.0; 3]; 3];
    e[0][0] = 0.4 * t;
    e[1][1] = -0.12 * t;
    e[2][2] = -0.12 * t;
    Ok(StrainState { e, c: t })
}

/// Path parameter beyond which some strain leaves the sampling box.
pub fn mechchem_path_extrapolation_start() -> f64 {
    MECHCHEM_DIAG_BOX / 0.4
}

// ------------------------------------------------------------ Schlögl

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchloglParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub a: f64,
    pub b: f64,
    /// Initial counts are uniform on `x0_min..=x0_max`.
    pub x0_min: u64,
    pub x0_max: u64,
    pub t_end: f64,
    pub n_snapshots: usize,
}

impl Default for SchloglParams {
    fn default() -> Self {
        Self { k1: 3e-7, k2: 1e-4, k3: 1e-3, k4: 3.5, a: 1e5, b: 2e5, x0_min: 0, x0_max: 600, t_end: 5.0, n_snapshots: 6 }
    }
}

impl SchloglParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if [self.k1, self.k2, self.k3, self.k4, self.a, self.b].iter().any(|v| !(*v > 0.0)) {
            return invalid("rates and reservoir populations must be positive");
        }
        if self.x0_min > self.x0_max || !(self.t_end > 0.0) || self.n_snapshots < 2 {
            return invalid("need x0_min <= x0_max, t_end > 0 and at least two snapshots");
        }
        Ok(())
    }

    /// `[a₁, a₂, a₃, a₄]` at count `x`.
    pub fn propensities(&self, x: u64) -> [f64; 4] {
        let xf = x as f64;
        let x1 = xf * (xf - 1.0).max(0.0);
        let x2 = x1 * (xf - 2.0).max(0.0);
        [self.k1 * self.a * x1 / 2.0, self.k2 * x2 / 6.0, self.k3 * self.b, self.k4 * xf]
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        linspace(0.0, self.t_end, self.n_snapshots)
    }

    /// Large-count drift `a₁ − a₂ + a₃ − a₄` as a polynomial in continuous `x`.
    pub fn drift(&self, x: f64) -> f64 {
        self.k1 * self.a * x * x / 2.0 - self.k2 * x.powi(3) / 6.0 + self.k3 * self.b - self.k4 * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaTrajectory {
    pub times: Vec<f64>,
    pub counts: Vec<u64>,
    pub events: u64,
}

/// Direct-method Gillespie simulation, recording the count at each snapshot time.
pub fn schlogl_ssa(params: &SchloglParams, rng: &mut impl Rng) -> Result<SsaTrajectory, DataError> {
    params.validate()?;
    let times = params.snapshot_times();
    let mut x: u64 = rng.gen_range(params.x0_min..=params.x0_max);
    let mut t = 0.0;
    let mut counts = Vec::with_capacity(times.len());
    let mut next = 0;
    let mut events = 0;
    loop {
        let a = params.propensities(x);
        let total: f64 = a.iter().sum();
        let dt = if total > 0.0 { -(1.0 - rng.gen::<f64>()).ln() / total } else { f64::INFINITY };
        while next < times.len() && times[next] < t + dt {
            counts.push(x);
            next += 1;
        }
        if next == times.len() {
            break;
        }
        t += dt;
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut reaction = 3;
        for (j, aj) in a.iter().enumerate() {
            acc += aj;
            if u < acc {
                reaction = j;
                break;
            }
        }
        match reaction {
            0 | 2 => x += 1,
            _ => x -= 1,
        }
        events += 1;
    }
    Ok(SsaTrajectory { times, counts, events })
}

pub fn schlogl_ensemble(params: &SchloglParams, n_traj: usize, seed: u64) -> Result<Vec<SsaTrajectory>, DataError> {
    (0..n_traj).map(|i| schlogl_ssa(params, &mut trajectory_rng(seed, i))).collect()
}

/// Roots of the drift on `[0, x_max]` with their stability.
pub fn schlogl_deterministic_roots(params: &SchloglParams, x_max: f64) -> Vec<(f64, bool)> {
    let f = |x: f64| params.drift(x);
    let grid = linspace(0.0, x_max, 20_001);
    let mut roots = Vec::new();
    for w in grid.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        if f(lo) == 0.0 || f(lo).signum() != f(hi).signum() {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(lo).signum() == f(mid).signum() && f(mid) != 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let r = 0.5 * (lo + hi);
            let h = 1e-6 * r.max(1.0);
            roots.push((r, f(r + h) - f(r - h) < 0.0));
        }
    }
    roots
}

// ---------------------------------------------------------- gene circuit

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneParams {
    pub a: f64,
    pub p1: f64,
    pub p2: f64,
    pub b: f64,
    pub s: f64,
    pub n: u32,
}

impl GeneParams {
    pub fn with_b(b: f64) -> Self {
        Self { a: 1.0, p1: 1.0, p2: 1.0, b, s: 1.0, n: 4 }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if [self.a, self.p1, self.p2, self.s].iter().any(|v| !(*v > 0.0)) || !(self.b >= 0.0) || self.n == 0 {
            return invalid("gene parameters must be positive with n >= 1");
        }
        Ok(())
    }
}

/// Both components of the circuit's velocity field, third term indexed as printed.
pub fn gene_rhs(x: [f64; 2], p: &GeneParams) -> [f64; 2] {
    let n = p.n as i32;
    let sn = p.s.powi(n);
    let [x1, x2] = x;
    let d1 = p.a * x1 * (p.p1 - x1) + p.b / (sn + x2.powi(n)) - p.b * n as f64 * x1.powi(n - 1) * x2 / (sn + x1.powi(n)).powi(2);
    let d2 = p.a * x2 * (p.p2 - x2) + p.b / (sn + x1.powi(n)) - p.b * n as f64 * x2.powi(n - 1) * x1 / (sn + x2.powi(n)).powi(2);
    [d1, d2]
}

/// Central-difference Jacobian `J[i][j] = ∂ẋᵢ/∂xⱼ`.
pub fn gene_jacobian(x: [f64; 2], p: &GeneParams, h: f64) -> [[f64; 2]; 2] {
    let mut j = [[0.0; 2]; 2];
    for col in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[col] += h;
        xm[col] -= h;
        let (fp, fm) = (gene_rhs(xp, p), gene_rhs(xm, p));
        for row in 0..2 {
            j[row][col] = (fp[row] - fm[row]) / (2.0 * h);
        }
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub x: [f64; 2],
    pub stable: bool,
}

/// Fixed points in `[0, 3]²` found by Newton from a lattice of starts.
pub fn gene_steady_states(p: &GeneParams) -> Vec<SteadyState> {
    let mut found: Vec<SteadyState> = Vec::new();
    for i in 0..=15 {
        for k in 0..=15 {
            let mut x = [0.05 + 0.2 * i as f64, 0.05 + 0.2 * k as f64];
            let mut converged = false;
            for _ in 0..100 {
                let f = gene_rhs(x, p);
                let j = gene_jacobian(x, p, 1e-7);
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                if det.abs() < 1e-14 {
                    break;
                }
                let dx0 = (j[1][1] * f[0] - j[0][1] * f[1]) / det;
                let dx1 = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
                x = [x[0] - dx0, x[1] - dx1];
                if !(x[0].is_finite() && x[1].is_finite()) || x[0] < -1e-9 || x[1] < -1e-9 || x[0] > 4.0 || x[1] > 4.0 {
                    break;
                }
                if dx0.abs().max(dx1.abs()) < 1e-13 {
                    converged = true;
                    break;
                }
            }
            if !converged || found.iter().any(|s| (s.x[0] - x[0]).abs() + (s.x[1] - x[1]).abs() < 1e-6) {
                continue;
            }
            let j = gene_jacobian(x, p, 1e-6);
            let tr = j[0][0] + j[1][1];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            found.push(SteadyState { x, stable: tr < 0.0 && det > 0.0 });
        }
    }
    found.sort_by(|a, b| a.x[0].total_cmp(&b.x[0]));
    found
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<[f64; 2]>,
    /// Velocity field at each recorded state.
    pub dx: Vec<[f64; 2]>,
}

/// One classical RK4 step, clipped at zero.
pub fn rk4_step<F: Fn([f64; 2]) -> [f64; 2]>(f: &F, x: [f64; 2], dt: f64) -> [f64; 2] {
    let add = |a: [f64; 2], b: [f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
    let k1 = f(x);
    let k2 = f(add(x, k1, dt / 2.0));
    let k3 = f(add(x, k2, dt / 2.0));
    let k4 = f(add(x, k3, dt));
    let mut out = [0.0; 2];
    for i in 0..2 {
        out[i] = (x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).max(0.0);
    }
    out
}

/// RK4 trajectories from uniform starts in `[0, 2]²`, recording every
/// `record_every` steps.
pub fn gene_trajectories(
    p: &GeneParams,
    n_traj: usize,
    t_end: f64,
    dt: f64,
    record_every: usize,
    seed: u64,
) -> Result<Vec<GeneTrajectory>, DataError> {
    p.validate()?;
    if !(dt > 0.0) || !(t_end > 0.0) || record_every == 0 {
        return invalid("need dt > 0, t_end > 0 and record_every >= 1");
    }
    let steps = (t_end / dt).round() as usize;
    let f = |x: [f64; 2]| gene_rhs(x, p);
    Ok((0..n_traj)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let mut x = [rng.gen_range(0.0..=2.0), rng.gen_range(0.0..=2.0)];
            let mut tr = GeneTrajectory { t: Vec::new(), x: Vec::new(), dx: Vec::new() };
            for k in 0..=steps {
                if k % record_every == 0 {
                    tr.t.push(k as f64 * dt);
                    tr.x.push(x);
                    tr.dx.push(f(x));
                }
                if k < steps {
                    x = rk4_step(&f, x, dt);
                }
            }
            tr
        })
        .collect())
}

// ------------------------------------------------------------- elastic

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticParams {
    pub bulk: f64,
    pub shear: f64,
    pub eps0: f64,
    pub dpsi: f64,
    pub k_plus: f64,
    pub k_minus: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self { bulk: 1.0, shear: 0.5, eps0: -0.1, dpsi: 0.006, k_plus: 0.006, k_minus: 0.006 }
    }
}

impl ElasticParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.bulk > 0.0 && self.shear > 0.0 && self.k_plus > 0.0 && self.k_minus > 0.0) {
            return invalid("K, G and k± must be positive");
        }
        Ok(())
    }

    /// Uniaxial modulus `(ℂ)₁₁₁₁ = K + 4G/3`.
    pub fn axial_modulus(&self) -> f64 {
        self.bulk + 4.0 * self.shear / 3.0
    }

    /// `E₀ : ℂ E₀` for `E₀ = ε₀ e₁⊗e₁`.
    pub fn e0_c_e0(&self) -> f64 {
        self.eps0 * self.eps0 * self.axial_modulus()
    }

    /// `S₁₁` for uniaxial strain `e11` at phase fraction `c`.
    pub fn stress(&self, e11: f64, c: f64) -> f64 {
        self.axial_modulus() * (e11 - c * self.eps0)
    }

    /// Conjugate force `κ = S·E₀ − Δψ`.
    pub fn kappa(&self, e11: f64, c: f64) -> f64 {
        self.stress(e11, c) * self.eps0 - self.dpsi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticState {
    pub t: f64,
    pub e11: f64,
    pub s11: f64,
    pub c: f64,
    pub kappa: f64,
}

/// Return mapping along a strain path of full tensors. Only `E₁₁` may be
/// nonzero and the path must start unstrained.
pub fn elastic_response(path: &[(f64, [[f64; 3]; 3])], p: &ElasticParams) -> Result<Vec<ElasticState>, DataError> {
    p.validate()?;
    for (t, e) in path {
        for (i, row) in e.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if (i, j) != (0, 0) && *v != 0.0 {
                    return invalid(format!("non-uniaxial strain at t = {t}: E[{}][{}] = {v}", i + 1, j + 1));
                }
            }
        }
    }
    let uni: Vec<(f64, f64)> = path.iter().map(|(t, e)| (*t, e[0][0])).collect();
    elastic_response_uniaxial(&uni, p)
}

pub fn elastic_response_uniaxial(path: &[(f64, f64)], p: &ElasticParams) -> Result<Vec<ElasticState>, DataError> {
    p.validate()?;
    match path.first() {
        None => return invalid("empty strain path"),
        Some((_, e)) if *e != 0.0 => return invalid("strain path must start at E = 0"),
        _ => {}
    }
    let e0ce0 = p.e0_c_e0();
    let mut c: f64 = 0.0;
    let mut out = Vec::with_capacity(path.len());
    for &(t, e11) in path {
        let trial = p.kappa(e11, c);
        let e0ce = p.axial_modulus() * p.eps0 * e11;
        if trial > p.k_plus && c < 1.0 {
            c = ((e0ce - p.dpsi - p.k_plus) / e0ce0).clamp(c, 1.0);
        } else if trial < -p.k_minus && c > 0.0 {
            c = ((e0ce - p.dpsi + p.k_minus) / e0ce0).clamp(0.0, c);
        }
        out.push(ElasticState { t, e11, s11: p.stress(e11, c), c, kappa: p.kappa(e11, c) });
    }
    Ok(out)
}

/// Random sawtooth `E₁₁` paths on `t ∈ [0, 1]`, `n_steps` samples each,
/// starting at zero. Each cycle ramps to a trough in `[−0.2, −0.03]` and
/// back up to a crest in `[−0.02, 0.05]`, with cycle period in `[0.2, 0.6]`.
pub fn sawtooth_paths(n_paths: usize, n_steps: usize, seed: u64) -> Result<Vec<Vec<(f64, f64)>>, DataError> {
    if n_steps < 2 {
        return invalid("a path needs at least two steps");
    }
    Ok((0..n_paths)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            // Knots (t, E11) of the piecewise-linear path.
            let mut knots = vec![(0.0, 0.0)];
            let mut t = 0.0;
            while t < 1.0 {
                let period: f64 = rng.gen_range(0.2..=0.6);
                let trough: f64 = rng.gen_range(-0.2..=-0.03);
                let crest: f64 = rng.gen_range(-0.02..=0.05);
                knots.push((t + 0.5 * period, trough));
                knots.push((t + period, crest));
                t += period;
            }
            linspace(0.0, 1.0, n_steps)
                .into_iter()
                .map(|t| {
                    let k = knots.partition_point(|&(tk, _)| tk <= t).clamp(1, knots.len() - 1);
                    let (t0, e0) = knots[k - 1];
                    let (t1, e1) = knots[k];
                    (t, e0 + (e1 - e0) * (t - t0) / (t1 - t0))
                })
                .collect()
        })
        .collect())
}

// ----------------------------------------------------------------- CSV

pub fn write_wells_csv(path: &Path, xs: &[f64], ys: &[f64]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y"])?;
    for (x, y) in xs.iter().zip(ys) {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mechchem_csv(path: &Path, data: &MechchemData) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["E11", "E22", "E33", "E12", "E13", "E23", "c", "S11", "S22", "S33", "S12", "S13", "S23", "mu"])?;
    for (x, g) in data.inputs.rows().into_iter().zip(data.gradients.rows()) {
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        for (k, v) in g.iter().enumerate() {
            let s = if (3..6).contains(&k) { 0.5 * v } else { *v };
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_schlogl_csv(path: &Path, trajs: &[SsaTrajectory]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["traj_id", "t", "x"])?;
    for (i, tr) in trajs.iter().enumerate() {
        for (t, x) in tr.times.iter().zip(&tr.counts) {
            w.write_record([i.to_string(), t.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_gene_csv(path: &Path, trajs: &[GeneTrajectory]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["traj_id", "t", "x1", "x2", "dx1", "dx2"])?;
    for (i, tr) in trajs.iter().enumerate() {
        for ((t, x), dx) in tr.t.iter().zip(&tr.x).zip(&tr.dx) {
            w.write_record([i.to_string(), t.to_string(), x[0].to_string(), x[1].to_string(), dx[0].to_string(), dx[1].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_elastic_csv(path: &Path, paths: &[Vec<ElasticState>]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path_id", "t", "E11", "S11", "c", "kappa"])?;
    for (i, states) in paths.iter().enumerate() {
        for s in states {
            w.write_record([i.to_string(), s.t.to_string(), s.e11.to_string(), s.s11.to_string(), s.c.to_string(), s.kappa.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
