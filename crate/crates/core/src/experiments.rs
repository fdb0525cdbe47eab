//! End-to-end experiment pipelines: generate, train, evaluate, report.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, DataError, ElasticParams, GeneParams, Normalizer, SchloglParams, Well};
use crate::density::{self, DensityError, DensityFitConfig, DensityGrid};
use crate::mixture::{LseModel, ModelConfig, ACTIVE_THRESHOLD};
use crate::training::{par_map, train, Dataset, ExecMode, GatePenalty, LossKind, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Wells1d,
    Mechchem,
    Schlogl,
    Elastic,
    Gene,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [Self::Wells1d, Self::Mechchem, Self::Schlogl, Self::Elastic, Self::Gene];

    pub fn name(self) -> &'static str {
        match self {
            Self::Wells1d => "wells1d",
            Self::Mechchem => "mechchem",
            Self::Schlogl => "schlogl",
            Self::Elastic => "elastic",
            Self::Gene => "gene",
        }
    }

    /// Architecture used when the spec does not override it.
    pub fn default_model(self) -> ModelConfig {
        let (input_dim, n_modes, n_hidden_layers, hidden_width) = match self {
            Self::Wells1d => (1, 10, 2, 10),
            Self::Mechchem => (7, 5, 2, 10),
            Self::Schlogl => (1, 5, 2, 10),
            Self::Elastic => (2, 2, 2, 19),
            Self::Gene => (2, 3, 3, 8),
        };
        ModelConfig { input_dim, n_modes, n_hidden_layers, hidden_width }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Self::Wells1d | Self::Mechchem | Self::Gene => 30_000,
            Self::Schlogl => 10_000,
            Self::Elastic => 5_000,
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment '{s}' (expected one of wells1d, mechchem, schlogl, elastic, gene)"))
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{context}: {source}")]
    Train { context: String, source: TrainError },
    #[error("{context}: {source}")]
    Data { context: String, source: DataError },
    #[error("{context}: {source}")]
    Density { context: String, source: DensityError },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Whether training diverged, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::Train { source: TrainError::Numerical { .. }, .. }
                | Self::Density { source: DensityError::Train(TrainError::Numerical { .. }), .. }
        )
    }
}

fn train_err(ctx: impl Into<String>) -> impl FnOnce(TrainError) -> ExperimentError {
    let context = ctx.into();
    move |source| ExperimentError::Train { context, source }
}

fn data_err(ctx: impl Into<String>) -> impl FnOnce(DataError) -> ExperimentError {
    let context = ctx.into();
    move |source| ExperimentError::Data { context, source }
}

fn density_err(ctx: impl Into<String>) -> impl FnOnce(DensityError) -> ExperimentError {
    let context = ctx.into();
    move |source| ExperimentError::Density { context, source }
}

fn invalid(e: impl fmt::Display) -> ExperimentError {
    ExperimentError::Invalid(e.to_string())
}

// ------------------------------------------------------------------ specs

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Defaults to the experiment's desk epoch count, or 150k with `full_protocol`.
    pub epochs: Option<usize>,
    pub full_protocol: bool,
    pub lr_network: f64,
    /// Defaults to `1e-4 · 150k / epochs`, so gates can travel the same
    /// distance as under the full protocol.
    pub lr_gate_scale: Option<f64>,
    pub l1_epsilon: f64,
    pub gate_penalty: GatePenalty,
    pub exec: ExecMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: None, full_protocol: false, lr_network: 1e-3, lr_gate_scale: None, l1_epsilon: 1e-4, gate_penalty: GatePenalty::Alpha, exec: ExecMode::default() }
    }
}

pub const FULL_PROTOCOL_EPOCHS: usize = 150_000;

impl TrainSettings {
    pub fn resolve(&self, id: ExperimentId, loss_kind: LossKind, seed: u64) -> TrainConfig {
        let default = if self.full_protocol { FULL_PROTOCOL_EPOCHS } else { id.default_epochs() };
        let epochs = self.epochs.unwrap_or(default);
        let lr_gate_scale = self
            .lr_gate_scale
            .unwrap_or_else(|| 1e-4 * (FULL_PROTOCOL_EPOCHS as f64 / epochs.max(1) as f64).max(1.0));
        TrainConfig {
            epochs,
            lr_network: self.lr_network,
            lr_gate_scale,
            l1_epsilon: self.l1_epsilon,
            gate_penalty: self.gate_penalty,
            loss_kind,
            seed,
            exec: self.exec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WellsSettings {
    pub well: Well,
    pub n_samples: usize,
    pub lo: f64,
    pub hi: f64,
    pub lattice_points: usize,
}

impl Default for WellsSettings {
    fn default() -> Self {
        Self { well: Well::Double, n_samples: 200, lo: -3.0, hi: 3.0, lattice_points: 601 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MechchemSettings {
    pub n_samples: usize,
    pub path_points: usize,
}

impl Default for MechchemSettings {
    fn default() -> Self {
        Self { n_samples: 1000, path_points: 101 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchloglSettings {
    pub params: SchloglParams,
    pub n_traj: usize,
    pub kl_weight: f64,
    pub n_grid: usize,
    pub grid_max_factor: f64,
    /// Density maxima count as modes above this fraction of the peak.
    pub mode_prominence: f64,
}

impl Default for SchloglSettings {
    fn default() -> Self {
        Self { params: SchloglParams::default(), n_traj: 200, kl_weight: 0.01, n_grid: 512, grid_max_factor: 1.2, mode_prominence: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticSettings {
    pub params: ElasticParams,
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_train_paths: usize,
    pub fixed_c: f64,
    /// Training rows drawn from the training paths.
    pub train_rows: usize,
}

impl Default for ElasticSettings {
    fn default() -> Self {
        Self { params: ElasticParams::default(), n_paths: 400, n_steps: 100, n_train_paths: 320, fixed_c: 0.5, train_rows: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneSettings {
    pub b_single: f64,
    pub b_double: f64,
    pub n_traj: usize,
    pub n_test_traj: usize,
    pub t_end: f64,
    pub dt: f64,
    pub record_every: usize,
    /// Well counting lattice: points per axis over `[0, domain]²`.
    pub lattice_points: usize,
    pub domain: f64,
    pub k_b: f64,
    pub b0: f64,
    pub transient_t_end: f64,
    pub n_initial: usize,
    pub capture_radius: f64,
}

impl Default for GeneSettings {
    fn default() -> Self {
        Self {
            b_single: 0.1,
            b_double: 1.0,
            n_traj: 40,
            n_test_traj: 20,
            t_end: 10.0,
            dt: 0.01,
            record_every: 100,
            lattice_points: 81,
            domain: 2.0,
            k_b: 0.7,
            b0: 0.01,
            transient_t_end: 30.0,
            n_initial: 100,
            capture_radius: 0.15,
        }
    }
}

/// A complete run description. Every field but `experiment` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub wells: WellsSettings,
    #[serde(default)]
    pub mechchem: MechchemSettings,
    #[serde(default)]
    pub schlogl: SchloglSettings,
    #[serde(default)]
    pub elastic: ElasticSettings,
    #[serde(default)]
    pub gene: GeneSettings,
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentId, seed: u64) -> Self {
        Self {
            experiment,
            seed,
            model: None,
            train: TrainSettings::default(),
            wells: WellsSettings::default(),
            mechchem: MechchemSettings::default(),
            schlogl: SchloglSettings::default(),
            elastic: ElasticSettings::default(),
            gene: GeneSettings::default(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.unwrap_or_else(|| self.experiment.default_model())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let m = self.model_config();
        m.validate().map_err(invalid)?;
        let want = self.experiment.default_model().input_dim;
        if m.input_dim != want {
            return Err(invalid(format!("{} takes {want} model inputs, config has {}", self.experiment, m.input_dim)));
        }
        let t = self.train.resolve(self.experiment, LossKind::Value, self.seed);
        t.validate().map_err(train_err("train"))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- metrics

/// 1 − SS_res / SS_tot.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64, ExperimentError> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(invalid(format!("r_squared needs equal nonzero lengths, got {} and {}", pred.len(), truth.len())));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(invalid("r_squared of a constant truth vector is undefined"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64).sqrt()
}

/// Pearson correlation; invariant to additive offsets.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Equispaced lattice with `n` points per axis over the box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: usize,
}

impl Lattice {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn len(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    fn index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for slot in idx.iter_mut() {
            *slot = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.n + i)
    }

    fn point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(k, &i)| self.lo[k] + (self.hi[k] - self.lo[k]) * i as f64 / (self.n - 1) as f64)
            .collect()
    }
}

/// Positions of strict interior lattice minima of `f`, lowest first, with
/// minima within 2 cells (Chebyshev) of a lower one merged into it.
pub fn find_wells<F: Fn(&[f64]) -> f64>(f: F, lattice: &Lattice) -> Result<Vec<Vec<f64>>, ExperimentError> {
    if lattice.dim() == 0 || lattice.n < 3 || lattice.lo.len() != lattice.hi.len() {
        return Err(invalid("well lattice needs at least 3 points per axis in at least one dimension"));
    }
    let d = lattice.dim();
    let values: Vec<f64> = (0..lattice.len()).map(|k| f(&lattice.point(&lattice.index(k)))).collect();
    let offsets: Vec<Vec<isize>> = (0..3usize.pow(d as u32))
        .map(|mut k| {
            (0..d)
                .map(|_| {
                    let o = (k % 3) as isize - 1;
                    k /= 3;
                    o
                })
                .collect::<Vec<_>>()
        })
        .filter(|o| o.iter().any(|&v| v != 0))
        .collect();
    let mut minima: Vec<(f64, Vec<usize>)> = Vec::new();
    for (k, &v) in values.iter().enumerate() {
        let idx = lattice.index(k);
        if idx.iter().any(|&i| i == 0 || i == lattice.n - 1) {
            continue;
        }
        let is_min = offsets.iter().all(|o| {
            let nb: Vec<usize> = idx.iter().zip(o).map(|(&i, &d)| (i as isize + d) as usize).collect();
            v < values[lattice.flat(&nb)]
        });
        if is_min {
            minima.push((v, idx));
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kept: Vec<Vec<usize>> = Vec::new();
    for (_, idx) in minima {
        let near = kept.iter().any(|k| k.iter().zip(&idx).all(|(&a, &b)| a.abs_diff(b) <= 2));
        if !near {
            kept.push(idx);
        }
    }
    Ok(kept.iter().map(|idx| lattice.point(idx)).collect())
}

pub fn count_wells(model: &LseModel, lattice: &Lattice) -> Result<usize, ExperimentError> {
    if model.input_dim() != lattice.dim() {
        return Err(invalid(format!("model takes {} inputs, lattice is {}-dimensional", model.input_dim(), lattice.dim())));
    }
    Ok(find_wells(|x| model.forward(x).expect("dimension checked"), lattice)?.len())
}

// --------------------------------------------------------------- transient

/// `b(t)` solving `ḃ = k b (1 − b)`, `b(0) = b0`.
pub fn logistic(t: f64, k: f64, b0: f64) -> f64 {
    let e = (k * t).exp();
    b0 * e / (1.0 - b0 + b0 * e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientConfig {
    pub k_b: f64,
    pub b0: f64,
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientTrajectory {
    pub t: Vec<f64>,
    pub b: Vec<f64>,
    pub x: Vec<[f64; 2]>,
}

/// Field `−∇((1 − b) Ψ₁ + b Ψ₂)` at `x`.
pub fn mixed_field(psi1: &LseModel, psi2: &LseModel, b: f64, x: [f64; 2]) -> [f64; 2] {
    let g1 = psi1.input_gradient(&x).expect("2D model");
    let g2 = psi2.input_gradient(&x).expect("2D model");
    [-((1.0 - b) * g1[0] + b * g2[0]), -((1.0 - b) * g1[1] + b * g2[1])]
}

/// RK4 under the transient mixed potential from each initial state,
/// recording every `record_every` steps and the final state.
pub fn transient_potential(
    psi1: &LseModel,
    psi2: &LseModel,
    config: &TransientConfig,
    initial: &[[f64; 2]],
    record_every: usize,
    exec: ExecMode,
) -> Result<Vec<TransientTrajectory>, ExperimentError> {
    if psi1.input_dim() != 2 || psi2.input_dim() != 2 {
        return Err(invalid("transient mixing needs two 2D potentials"));
    }
    if !(config.dt > 0.0 && config.t_end > 0.0) || record_every == 0 {
        return Err(invalid("transient mixing needs dt > 0, t_end > 0 and record_every >= 1"));
    }
    let steps = (config.t_end / config.dt).round() as usize;
    let h = config.dt;
    let b_at = |t: f64| logistic(t, config.k_b, config.b0);
    Ok(par_map(initial, exec, |&x0| {
        let mut x = x0;
        let mut tr = TransientTrajectory { t: Vec::new(), b: Vec::new(), x: Vec::new() };
        for k in 0..=steps {
            let t = k as f64 * h;
            if k % record_every == 0 || k == steps {
                tr.t.push(t);
                tr.b.push(b_at(t));
                tr.x.push(x);
            }
            if k == steps {
                break;
            }
            let f = |t: f64, x: [f64; 2]| mixed_field(psi1, psi2, b_at(t), x);
            let add = |a: [f64; 2], d: [f64; 2], s: f64| [a[0] + s * d[0], a[1] + s * d[1]];
            let k1 = f(t, x);
            let k2 = f(t + h / 2.0, add(x, k1, h / 2.0));
            let k3 = f(t + h / 2.0, add(x, k2, h / 2.0));
            let k4 = f(t + h, add(x, k3, h));
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        tr
    }))
}

// ---------------------------------------------------------------- outcomes

/// The `metrics.json` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub rmse: f64,
    pub r2: f64,
    pub active_modes: usize,
    pub rho: f64,
    pub well_count: Option<usize>,
    pub epochs: usize,
    pub wall_time_s: f64,
}

impl MetricsReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { wall_time_s: 0.0, ..self.clone() } == Self { wall_time_s: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub t: f64,
    pub n_samples: usize,
    pub bandwidth: f64,
    pub kde_modes: usize,
    pub fit_modes: usize,
    pub kl_kde_fit: f64,
    pub active_modes: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneFitReport {
    pub b: f64,
    pub well_count: usize,
    pub minima: Vec<Vec<f64>>,
    pub true_stable_states: Vec<[f64; 2]>,
    pub rmse: f64,
    pub r2: f64,
    /// Held-out points whose fitted velocity is within 15° of the truth.
    pub angle_within_15deg: f64,
    pub active_modes: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientReport {
    pub n_initial: usize,
    pub capture_radius: f64,
    /// Fraction of endpoints within the radius of some Ψ₂ minimum.
    pub captured_fraction: f64,
    /// Endpoints captured by each Ψ₂ minimum, in `GeneFitReport::minima` order.
    pub per_minimum: Vec<usize>,
}

/// Experiment-specific results beyond the common metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "lowercase")]
pub enum Details {
    Wells1d { well: Well, rel_rmse: f64, true_well_count: usize },
    Mechchem { grad_r2: f64, component_r2: Vec<f64>, potential_corr: f64, extrapolation_t: f64 },
    Schlogl { snapshots: Vec<SnapshotReport> },
    Elastic { stress_r2: f64, stress_rmse: f64, e0_c_e0: f64, min_step_dissipation: f64, c_min: f64, c_max: f64 },
    Gene { fits: Vec<GeneFitReport>, transient: TransientReport },
}

/// A CSV file emitted by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: impl IntoIterator<Item = String>) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn write(&self, dir: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(dir.join(&self.name))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cells(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Empty for the primary model.
    pub label: String,
    pub model: LseModel,
    pub normalizer: Option<Normalizer>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub metrics: MetricsReport,
    pub details: Details,
    /// The primary model comes first.
    pub models: Vec<TrainedModel>,
    pub tables: Vec<Table>,
}

impl ExperimentOutcome {
    /// Writes `metrics.json`, `details.json`, every table and a history per model.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), to_json(&self.metrics))?;
        std::fs::write(dir.join("details.json"), to_json(&self.details))?;
        for t in &self.tables {
            t.write(dir).map_err(|e| invalid(format!("writing {}: {e}", t.name)))?;
        }
        for m in &self.models {
            let name = if m.label.is_empty() { "history.csv".to_string() } else { format!("history_{}.csv", m.label) };
            m.history.write_csv(&dir.join(name))?;
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

// ---------------------------------------------------------------- pipelines

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    spec.validate()?;
    let start = Instant::now();
    let mut out = match spec.experiment {
        ExperimentId::Wells1d => run_wells(spec)?,
        ExperimentId::Mechchem => run_mechchem(spec)?,
        ExperimentId::Schlogl => run_schlogl(spec)?,
        ExperimentId::Elastic => run_elastic(spec)?,
        ExperimentId::Gene => run_gene(spec)?,
    };
    out.metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Runs `spec` for each seed, in parallel when `exec` allows.
pub fn run_seeds(spec: &ExperimentSpec, seeds: &[u64], exec: ExecMode) -> Vec<Result<ExperimentOutcome, ExperimentError>> {
    par_map(seeds, exec, |&seed| run_experiment(&ExperimentSpec { seed, ..spec.clone() }))
}

fn metrics(spec: &ExperimentSpec, model: &LseModel, rmse: f64, r2: f64, well_count: Option<usize>, epochs: usize) -> MetricsReport {
    MetricsReport {
        experiment: spec.experiment,
        seed: spec.seed,
        rmse,
        r2,
        active_modes: model.active_mode_count(ACTIVE_THRESHOLD),
        rho: model.rho(),
        well_count,
        epochs,
        wall_time_s: 0.0,
    }
}

fn fit(spec: &ExperimentSpec, data: &Dataset, kind: LossKind, seed: u64, ctx: &str) -> Result<(LseModel, TrainHistory, TrainConfig), ExperimentError> {
    let mut model = LseModel::new(spec.model_config(), seed).map_err(invalid)?;
    let tc = spec.train.resolve(spec.experiment, kind, seed);
    let history = train(&mut model, data, &tc).map_err(train_err(ctx))?;
    Ok((model, history, tc))
}

fn run_wells(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let w = &spec.wells;
    let data = datagen::sample_1d_dataset(w.well, w.n_samples, (w.lo, w.hi), spec.seed).map_err(data_err("wells1d data"))?;
    let (model, history, tc) = fit(spec, &data.train, LossKind::Value, spec.seed, "wells1d training")?;
    let pred: Vec<f64> = data.grid_x.iter().map(|&x| model.forward(&[x]).expect("1D")).collect();
    let err = rmse(&pred, &data.grid_y);
    let range = data.grid_y.iter().copied().fold(f64::NEG_INFINITY, f64::max) - data.grid_y.iter().copied().fold(f64::INFINITY, f64::min);
    let lattice = Lattice::new(vec![w.lo], vec![w.hi], w.lattice_points);
    let wells = count_wells(&model, &lattice)?;
    let true_wells = find_wells(|x| w.well.eval(x[0]), &lattice)?.len();
    let mut table = Table::new("predictions.csv", &["x", "y_true", "y_pred"]);
    for ((x, y), p) in data.grid_x.iter().zip(&data.grid_y).zip(&pred) {
        table.push(cells(&[*x, *y, *p]));
    }
    Ok(ExperimentOutcome {
        metrics: metrics(spec, &model, err, r_squared(&pred, &data.grid_y)?, Some(wells), tc.epochs),
        details: Details::Wells1d { well: w.well, rel_rmse: err / range, true_well_count: true_wells },
        models: vec![TrainedModel { label: String::new(), model, normalizer: None, history }],
        tables: vec![table],
    })
}

fn run_mechchem(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let s = &spec.mechchem;
    let data = datagen::mechchem_dataset(s.n_samples, spec.seed).map_err(data_err("mechchem data"))?;
    let (train_set, _) = data.datasets();
    let (model, history, tc) = fit(spec, &train_set, LossKind::Gradient, spec.seed, "mechchem training")?;
    let nz = &data.normalizer;
    let predict = |x: &[f64]| {
        let u = nz.normalize_inputs(x);
        let psi = nz.psi_scale * model.forward(&u).expect("7D");
        let g = nz.denormalize_gradient(&model.input_gradient(&u).expect("7D"));
        (psi, g)
    };

    let mut parity = Table::new("parity.csv", &["row", "component", "true", "pred"]);
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    let mut per_comp: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 7];
    let (mut psi_true, mut psi_pred) = (Vec::new(), Vec::new());
    for &r in &data.test_idx {
        let x = data.inputs.row(r).to_vec();
        let (psi, g) = predict(&x);
        psi_true.push(data.energies[r]);
        psi_pred.push(psi);
        for k in 0..7 {
            let t = data.gradients[[r, k]];
            truth.push(t);
            pred.push(g[k]);
            per_comp[k].0.push(t);
            per_comp[k].1.push(g[k]);
            parity.push([r.to_string(), k.to_string(), t.to_string(), g[k].to_string()]);
        }
    }
    let grad_r2 = r_squared(&pred, &truth)?;
    let component_r2 = per_comp.iter().map(|(t, p)| r_squared(p, t)).collect::<Result<Vec<_>, _>>()?;
    let potential_corr = correlation(&psi_pred, &psi_true);

    let t_ex = datagen::mechchem_path_extrapolation_start();
    let energy = datagen::MechchemEnergy::default();
    let mut path = Table::new(
        "predictions.csv",
        &["t", "psi_true", "psi_pred", "S11_true", "S11_pred", "mu_true", "mu_pred", "extrapolation"],
    );
    // Predicted potential is aligned to the truth by its mean offset on the held-out set.
    let offset = psi_true.iter().zip(&psi_pred).map(|(a, b)| a - b).sum::<f64>() / psi_true.len() as f64;
    for t in datagen::linspace(0.0, 1.0, s.path_points) {
        let st = datagen::mechchem_path(t).map_err(data_err("mechchem path"))?;
        let x = st.inputs();
        let g_true = datagen::mechchem_input_gradient(&x);
        let (psi, g) = predict(&x);
        let mut row = cells(&[t, crate::autodiff::ScalarField::eval(&energy, &x[..]), psi + offset, g_true[0], g[0], g_true[6], g[6]]);
        row.push((t > t_ex).to_string());
        path.push(row);
    }
    Ok(ExperimentOutcome {
        metrics: metrics(spec, &model, rmse(&pred, &truth), grad_r2, None, tc.epochs),
        details: Details::Mechchem { grad_r2, component_r2, potential_corr, extrapolation_t: t_ex },
        models: vec![TrainedModel { label: String::new(), model, normalizer: Some(data.normalizer.clone()), history }],
        tables: vec![path, parity],
    })
}

fn run_schlogl(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let s = &spec.schlogl;
    let trajs = datagen::schlogl_ensemble(&s.params, s.n_traj, spec.seed).map_err(data_err("schlogl SSA"))?;
    let times = s.params.snapshot_times();
    let m = spec.model_config();
    let base = DensityFitConfig {
        n_modes: m.n_modes,
        n_hidden_layers: m.n_hidden_layers,
        hidden_width: m.hidden_width,
        kl_weight: s.kl_weight,
        n_grid: s.n_grid,
        grid_max_factor: s.grid_max_factor,
        train: spec.train.resolve(spec.experiment, LossKind::Value, spec.seed),
    };
    // The initial state is drawn, not simulated; only later snapshots are fitted.
    let snaps: Vec<usize> = (1..times.len()).collect();
    let fits = par_map(&snaps, spec.train.exec, |&k| {
        let samples: Vec<f64> = trajs.iter().map(|t| t.counts[k] as f64).collect();
        let ctx = format!("schlogl snapshot t = {}", times[k]);
        let fit = density::fit_density(&samples, &base).map_err(density_err(ctx.clone()))?;
        let bw = density::silverman_bandwidth(&samples);
        let kde = density::kde(&samples, bw, fit.grid.lo, fit.grid.hi, s.n_grid).map_err(density_err(ctx))?;
        Ok::<_, ExperimentError>((k, samples.len(), bw, fit, kde))
    });
    let mut reports = Vec::new();
    let mut models = Vec::new();
    let mut table = Table::new("density.csv", &["t", "y", "kde", "fit"]);
    let mut last: Option<(DensityGrid, DensityGrid)> = None;
    for r in fits {
        let (k, n, bw, fit, kde) = r?;
        for ((y, q), p) in kde.x.iter().zip(&kde.density).zip(&fit.grid.density) {
            table.push(cells(&[times[k], *y, *q, *p]));
        }
        reports.push(SnapshotReport {
            t: times[k],
            n_samples: n,
            bandwidth: bw,
            kde_modes: kde.mode_count(s.mode_prominence),
            fit_modes: fit.grid.mode_count(s.mode_prominence),
            kl_kde_fit: density::kl_divergence(&kde, &fit.grid).map_err(density_err("schlogl KL"))?,
            active_modes: fit.model.active_mode_count(ACTIVE_THRESHOLD),
            rho: fit.model.rho(),
        });
        let normalizer = Normalizer { mean: vec![0.0], std: vec![fit.scale], psi_scale: 1.0 };
        models.push(TrainedModel { label: format!("t{k}"), model: fit.model, normalizer: Some(normalizer), history: fit.history });
        last = Some((kde, fit.grid));
    }
    let (kde, grid) = last.ok_or_else(|| invalid("schlogl needs at least two snapshots"))?;
    // The final snapshot is primary.
    models.rotate_right(1);
    models[0].label.clear();
    let final_report = reports.last().expect("nonempty");
    let mut traj_table = Table::new("schlogl.csv", &["traj_id", "t", "x"]);
    for (i, tr) in trajs.iter().enumerate() {
        for (t, x) in tr.times.iter().zip(&tr.counts) {
            traj_table.push([i.to_string(), t.to_string(), x.to_string()]);
        }
    }
    Ok(ExperimentOutcome {
        metrics: metrics(
            spec,
            &models[0].model,
            rmse(&grid.density, &kde.density),
            r_squared(&grid.density, &kde.density)?,
            Some(final_report.fit_modes),
            base.train.epochs,
        ),
        details: Details::Schlogl { snapshots: reports },
        models,
        tables: vec![table, traj_table],
    })
}

fn run_elastic(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let s = &spec.elastic;
    let p = &s.params;
    if s.n_train_paths == 0 || s.n_train_paths >= s.n_paths {
        return Err(invalid("elastic needs 0 < n_train_paths < n_paths"));
    }
    let paths = datagen::sawtooth_paths(s.n_paths, s.n_steps, spec.seed).map_err(data_err("elastic paths"))?;
    let responses = paths
        .iter()
        .map(|path| datagen::elastic_response_uniaxial(path, p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err("elastic return mapping"))?;
    let mut min_diss = f64::INFINITY;
    let (mut c_min, mut c_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &responses {
        for w in r.windows(2) {
            min_diss = min_diss.min(w[1].kappa * (w[1].c - w[0].c));
        }
        for st in r {
            c_min = c_min.min(st.c);
            c_max = c_max.max(st.c);
        }
    }

    // Fixed phase: Ψ(E11, c) with c frozen, fitted to S11 only.
    let train_points: Vec<f64> = paths[..s.n_train_paths].iter().flatten().map(|&(_, e)| e).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows: Vec<f64> = (0..s.train_rows).map(|_| train_points[rng.gen_range(0..train_points.len())]).collect();
    let raw_x = Array2::from_shape_fn((rows.len(), 2), |(i, j)| if j == 0 { rows[i] } else { s.fixed_c });
    let raw_g = Array2::from_shape_fn((rows.len(), 2), |(i, j)| if j == 0 { p.stress(rows[i], s.fixed_c) } else { 0.0 });
    let nz = Normalizer::fit(&raw_x, &raw_g);
    let train_set = Dataset::new(nz.normalize_matrix(&raw_x), nz.normalize_gradient_matrix(&raw_g))
        .and_then(|d| d.with_component_weights(vec![1.0, 0.0]))
        .map_err(train_err("elastic data"))?;
    let (model, history, tc) = fit(spec, &train_set, LossKind::Gradient, spec.seed, "elastic training")?;
    let predict = |e11: f64| nz.denormalize_gradient(&model.input_gradient(&nz.normalize_inputs(&[e11, s.fixed_c])).expect("2D"))[0];

    let mut table = Table::new("predictions.csv", &["path_id", "t", "E11", "S11_true", "S11_pred"]);
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (i, path) in paths.iter().enumerate().skip(s.n_train_paths) {
        for &(t, e) in path {
            let (st, sp) = (p.stress(e, s.fixed_c), predict(e));
            truth.push(st);
            pred.push(sp);
            table.push([i.to_string(), t.to_string(), e.to_string(), st.to_string(), sp.to_string()]);
        }
    }
    let stress_r2 = r_squared(&pred, &truth)?;
    let stress_rmse = rmse(&pred, &truth);
    let lo = train_points.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = train_points.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lattice = Lattice::new(vec![lo], vec![hi], 201);
    let wells = find_wells(|x| model.forward(&nz.normalize_inputs(&[x[0], s.fixed_c])).expect("2D"), &lattice)?.len();

    let mut data_table = Table::new("elastic.csv", &["path_id", "t", "E11", "S11", "c", "kappa"]);
    for (i, r) in responses.iter().enumerate() {
        for st in r {
            data_table.push([i.to_string(), st.t.to_string(), st.e11.to_string(), st.s11.to_string(), st.c.to_string(), st.kappa.to_string()]);
        }
    }
    Ok(ExperimentOutcome {
        metrics: metrics(spec, &model, stress_rmse, stress_r2, Some(wells), tc.epochs),
        details: Details::Elastic { stress_r2, stress_rmse, e0_c_e0: p.e0_c_e0(), min_step_dissipation: min_diss, c_min, c_max },
        models: vec![TrainedModel { label: String::new(), model, normalizer: Some(nz), history }],
        tables: vec![table, data_table],
    })
}

fn gene_dataset(trajs: &[datagen::GeneTrajectory]) -> Result<Dataset, ExperimentError> {
    let pts: Vec<([f64; 2], [f64; 2])> = trajs.iter().flat_map(|t| t.x.iter().copied().zip(t.dx.iter().copied())).collect();
    let x = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i].0[j]);
    // Gradient descent dynamics: ∇Ψ = −ẋ.
    let y = Array2::from_shape_fn((pts.len(), 2), |(i, j)| -pts[i].1[j]);
    Dataset::new(x, y).map_err(train_err("gene data"))
}

fn run_gene(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let g = &spec.gene;
    let lattice = Lattice::new(vec![0.0, 0.0], vec![g.domain, g.domain], g.lattice_points);
    let bs = [g.b_single, g.b_double];
    let fits = par_map(&bs, spec.train.exec, |&b| {
        let p = GeneParams::with_b(b);
        let ctx = format!("gene b = {b}");
        let trajs = datagen::gene_trajectories(&p, g.n_traj, g.t_end, g.dt, g.record_every, spec.seed).map_err(data_err(ctx.clone()))?;
        let test = datagen::gene_trajectories(&p, g.n_test_traj, g.t_end, g.dt, g.record_every, spec.seed.wrapping_add(1))
            .map_err(data_err(ctx.clone()))?;
        let (model, history, tc) = fit(spec, &gene_dataset(&trajs)?, LossKind::Gradient, spec.seed, &ctx)?;
        Ok::<_, ExperimentError>((b, p, trajs, test, model, history, tc))
    });
    let mut models = Vec::new();
    let mut reports = Vec::new();
    let mut pred_table = Table::new("predictions.csv", &["b", "x1", "x2", "dx1_true", "dx2_true", "dx1_pred", "dx2_pred"]);
    let mut data_table = Table::new("gene.csv", &["b", "traj_id", "t", "x1", "x2", "dx1", "dx2"]);
    let mut epochs = 0;
    for r in fits {
        let (b, p, trajs, test, model, history, tc) = r?;
        epochs = tc.epochs;
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        let (mut aligned, mut counted) = (0usize, 0usize);
        for (x, dx) in test.iter().flat_map(|t| t.x.iter().zip(&t.dx)) {
            let grad = model.input_gradient(x).expect("2D");
            let v = [-grad[0], -grad[1]];
            truth.extend_from_slice(dx);
            pred.extend_from_slice(&v);
            let (nt, np) = (dx[0].hypot(dx[1]), v[0].hypot(v[1]));
            // Directions are undefined at the fixed points themselves.
            if nt > 1e-3 {
                counted += 1;
                let cos = (dx[0] * v[0] + dx[1] * v[1]) / (nt * np.max(f64::MIN_POSITIVE));
                if cos >= 15f64.to_radians().cos() {
                    aligned += 1;
                }
            }
            pred_table.push(cells(&[b, x[0], x[1], dx[0], dx[1], v[0], v[1]]));
        }
        for (i, tr) in trajs.iter().enumerate() {
            for ((t, x), dx) in tr.t.iter().zip(&tr.x).zip(&tr.dx) {
                data_table.push(cells(&[b, i as f64, *t, x[0], x[1], dx[0], dx[1]]));
            }
        }
        let minima = find_wells(|x| model.forward(x).expect("2D"), &lattice)?;
        let minima: Vec<Vec<f64>> = minima.iter().map(|m| refine_minimum(&model, m)).collect();
        reports.push(GeneFitReport {
            b,
            well_count: minima.len(),
            minima,
            true_stable_states: datagen::gene_steady_states(&p).into_iter().filter(|s| s.stable).map(|s| s.x).collect(),
            rmse: rmse(&pred, &truth),
            r2: r_squared(&pred, &truth)?,
            angle_within_15deg: aligned as f64 / counted.max(1) as f64,
            active_modes: model.active_mode_count(ACTIVE_THRESHOLD),
            rho: model.rho(),
        });
        models.push(TrainedModel { label: format!("b{b}"), model, normalizer: None, history });
    }

    let mut rng = datagen::trajectory_rng(spec.seed.wrapping_add(2), 0);
    let initial: Vec<[f64; 2]> = (0..g.n_initial).map(|_| [rng.gen_range(0.0..=g.domain), rng.gen_range(0.0..=g.domain)]).collect();
    let tcfg = TransientConfig { k_b: g.k_b, b0: g.b0, t_end: g.transient_t_end, dt: g.dt };
    let trajs = transient_potential(&models[0].model, &models[1].model, &tcfg, &initial, 100, spec.train.exec)?;
    let minima = &reports[1].minima;
    let mut per_minimum = vec![0; minima.len()];
    let mut transient_table = Table::new("transient.csv", &["ic", "t", "b", "x1", "x2"]);
    for (i, tr) in trajs.iter().enumerate() {
        let end = tr.x.last().expect("recorded");
        if let Some(j) = minima.iter().position(|m| (end[0] - m[0]).hypot(end[1] - m[1]) <= g.capture_radius) {
            per_minimum[j] += 1;
        }
        for ((t, b), x) in tr.t.iter().zip(&tr.b).zip(&tr.x) {
            transient_table.push(cells(&[i as f64, *t, *b, x[0], x[1]]));
        }
    }
    let captured: usize = per_minimum.iter().sum();
    let transient = TransientReport {
        n_initial: g.n_initial,
        capture_radius: g.capture_radius,
        captured_fraction: captured as f64 / g.n_initial.max(1) as f64,
        per_minimum,
    };

    // Ψ₂ is primary.
    models.swap(0, 1);
    models[0].label.clear();
    let r = &reports[1];
    let m = metrics(spec, &models[0].model, r.rmse, r.r2, Some(r.well_count), epochs);
    Ok(ExperimentOutcome {
        metrics: m,
        details: Details::Gene { fits: reports, transient },
        models,
        tables: vec![pred_table, transient_table, data_table],
    })
}

/// Polishes a lattice minimum by gradient descent with backtracking.
fn refine_minimum(model: &LseModel, start: &[f64]) -> Vec<f64> {
    let mut x = start.to_vec();
    let mut f = model.forward(&x).expect("dimension");
    let mut step = 1e-2;
    for _ in 0..2000 {
        let g = model.input_gradient(&x).expect("dimension");
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn < 1e-10 {
            break;
        }
        let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
        let ft = model.forward(&trial).expect("dimension");
        if ft < f {
            x = trial;
            f = ft;
            step *= 1.2;
        } else {
            step *= 0.5;
            if step < 1e-14 {
                break;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_squared_examples() {
        let t = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&[3.5; 4], &t).unwrap(), 0.0);
        assert!(r_squared(&[1.0], &[1.0]).is_err());
        assert!(r_squared(&[1.0, 2.0], &[1.0]).is_err());
        assert!((correlation(&[1.0, 2.0, 3.0], &[11.0, 12.0, 13.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lattice_wells_of_closed_forms() {
        let lat = Lattice::new(vec![-3.0], vec![3.0], 601);
        let count = |w: Well| find_wells(|x| w.eval(x[0]), &lat).unwrap().len();
        assert_eq!(count(Well::Double), 2);
        assert_eq!(count(Well::Modulated), 4);
        // The x = −1 branch never attains the minimum.
        assert_eq!(count(Well::Minmix), 2);
        let mins = find_wells(|x| Well::Minmix.eval(x[0]), &lat).unwrap();
        assert!((mins[0][0] - 0.0).abs() < 1e-12 && (mins[1][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wells_merge_and_dimension() {
        let lat = Lattice::new(vec![-1.0, -1.0], vec![1.0, 1.0], 41);
        let bowl = |x: &[f64]| x[0] * x[0] + x[1] * x[1];
        assert_eq!(find_wells(bowl, &lat).unwrap(), vec![vec![0.0, 0.0]]);
        let two = |x: &[f64]| ((x[0] - 0.5).powi(2) + x[1] * x[1]).min((x[0] + 0.5).powi(2) + x[1] * x[1]);
        assert_eq!(find_wells(two, &lat).unwrap().len(), 2);
        // Minima one cell apart collapse into one.
        let ripple = |x: &[f64]| x[0] * x[0] + 1e-3 * (x[0] * 20.0 * std::f64::consts::PI).cos() + x[1] * x[1];
        let n = find_wells(ripple, &Lattice::new(vec![-0.1, -1.0], vec![0.1, 1.0], 21)).unwrap().len();
        assert!(n <= 2);
        assert!(find_wells(bowl, &Lattice::new(vec![0.0], vec![1.0], 2)).is_err());
        let m = LseModel::new(ModelConfig { input_dim: 2, n_modes: 1, n_hidden_layers: 1, hidden_width: 3 }, 0).unwrap();
        assert!(count_wells(&m, &Lattice::new(vec![0.0], vec![1.0], 10)).is_err());
    }

    #[test]
    fn logistic_midpoint() {
        let (k, b0): (f64, f64) = (0.7, 0.01);
        let t = ((1.0 - b0) / b0).ln() / k;
        assert!((logistic(t, k, b0) - 0.5).abs() < 1e-14);
        assert_eq!(logistic(0.0, k, b0), b0);
        // Closed form satisfies ḃ = k b (1 − b).
        let (t, h) = (3.0, 1e-6);
        let db = (logistic(t + h, k, b0) - logistic(t - h, k, b0)) / (2.0 * h);
        let b = logistic(t, k, b0);
        assert!((db - k * b * (1.0 - b)).abs() < 1e-8);
    }

    #[test]
    fn transient_field_at_b_zero() {
        let c = ModelConfig { input_dim: 2, n_modes: 2, n_hidden_layers: 1, hidden_width: 4 };
        let (m1, m2) = (LseModel::new(c, 1).unwrap(), LseModel::new(c, 2).unwrap());
        let x = [0.3, 0.8];
        let g = m1.input_gradient(&x).unwrap();
        assert_eq!(mixed_field(&m1, &m2, 0.0, x), [-g[0], -g[1]]);
        let cfg = TransientConfig { k_b: 0.7, b0: 0.01, t_end: 0.5, dt: 0.01 };
        let trajs = transient_potential(&m1, &m2, &cfg, &[x, [1.0, 1.0]], 10, ExecMode::Sequential).unwrap();
        assert_eq!(trajs.len(), 2);
        assert_eq!(trajs[0].x[0], x);
        assert_eq!(trajs[0].t.last(), Some(&0.5));
        let par = transient_potential(&m1, &m2, &cfg, &[x, [1.0, 1.0]], 10, ExecMode::Parallel).unwrap();
        assert_eq!(trajs, par);
    }

    #[test]
    fn spec_defaults_and_unknown_keys() {
        let s: ExperimentSpec = serde_json::from_str(r#"{"experiment": "wells1d"}"#).unwrap();
        assert_eq!(s, ExperimentSpec::new(ExperimentId::Wells1d, 0));
        let t = s.train.resolve(s.experiment, LossKind::Value, 0);
        assert_eq!((t.epochs, t.lr_network, t.l1_epsilon), (30_000, 1e-3, 1e-4));
        assert!((t.lr_gate_scale - 5e-4).abs() < 1e-18);
        let full = TrainSettings { full_protocol: true, ..Default::default() }.resolve(ExperimentId::Wells1d, LossKind::Value, 0);
        assert_eq!((full.epochs, full.lr_gate_scale), (150_000, 1e-4));
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"experiment": "wells1d", "sed": 3}"#).is_err());
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"experiment": "gene", "gene": {"bb": 1}}"#).is_err());
        let bad = ExperimentSpec { model: Some(ExperimentId::Mechchem.default_model()), ..s };
        assert!(bad.validate().is_err());
        assert_eq!("gene".parse::<ExperimentId>(), Ok(ExperimentId::Gene));
        assert!("genes".parse::<ExperimentId>().is_err());
    }

    fn quick(id: ExperimentId, epochs: usize) -> ExperimentSpec {
        let mut s = ExperimentSpec::new(id, 3);
        s.train.epochs = Some(epochs);
        s
    }

    #[test]
    fn wells_pipeline_runs_and_is_deterministic() {
        let s = quick(ExperimentId::Wells1d, 200);
        let a = run_experiment(&s).unwrap();
        let b = run_experiment(&s).unwrap();
        assert!(a.metrics.same_outcome(&b.metrics));
        assert_eq!(a.models, b.models);
        assert_eq!(a.tables, b.tables);
        assert_eq!(a.tables[0].rows.len(), 200);
        assert!(a.metrics.r2 <= 1.0);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        for f in ["metrics.json", "details.json", "predictions.csv", "history.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m: MetricsReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m, a.metrics);
    }

    #[test]
    fn other_pipelines_run() {
        let mut m = quick(ExperimentId::Mechchem, 20);
        m.mechchem.n_samples = 100;
        let mut sc = quick(ExperimentId::Schlogl, 20);
        sc.schlogl.n_traj = 20;
        sc.schlogl.params.t_end = 0.5;
        sc.schlogl.n_grid = 64;
        let mut e = quick(ExperimentId::Elastic, 20);
        e.elastic.n_paths = 20;
        e.elastic.n_train_paths = 16;
        let mut g = quick(ExperimentId::Gene, 20);
        g.gene.n_traj = 4;
        g.gene.n_test_traj = 2;
        g.gene.n_initial = 4;
        g.gene.transient_t_end = 1.0;
        g.gene.lattice_points = 11;
        for s in [m, sc, e, g] {
            let out = run_experiment(&s).unwrap_or_else(|err| panic!("{}: {err}", s.experiment));
            assert_eq!(out.metrics.experiment, s.experiment);
            assert_eq!(out.metrics.epochs, 20);
            assert!(out.models[0].label.is_empty());
            assert!(!out.tables.is_empty());
        }
    }
}
