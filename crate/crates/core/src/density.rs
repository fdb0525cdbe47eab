//! One-dimensional density fitting: Gaussian KDE reference, grid
//! normalization of an LSE log-density and the ELBO fit.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::linspace;
use crate::mixture::{LseModel, ModelConfig};
use crate::training::{train, Dataset, ElboSpec, LossKind, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("{0}")]
    Invalid(String),
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Density values on an equispaced grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub lo: f64,
    pub hi: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub log_density: Vec<f64>,
}

fn trapezoid_weights(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    let mut w = vec![h; n];
    w[0] *= 0.5;
    w[n - 1] *= 0.5;
    w
}

impl DensityGrid {
    /// Normalizes unnormalized log-values on `n` equispaced points of `[lo, hi]`.
    pub fn from_log_values(lo: f64, hi: f64, log_values: Vec<f64>) -> Self {
        let n = log_values.len();
        let w = trapezoid_weights(n, lo, hi);
        let m = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + w.iter().zip(&log_values).map(|(wk, l)| wk * (l - m).exp()).sum::<f64>().ln();
        let log_density: Vec<f64> = log_values.iter().map(|l| l - log_z).collect();
        let density = log_density.iter().map(|l| l.exp()).collect();
        Self { lo, hi, x: linspace(lo, hi, n), density, log_density }
    }

    pub fn integral(&self) -> f64 {
        trapezoid_weights(self.x.len(), self.lo, self.hi).iter().zip(&self.density).map(|(w, p)| w * p).sum()
    }

    /// Number of local maxima rising above both neighbouring minima by more
    /// than `rel_prominence` times the peak density.
    pub fn mode_count(&self, rel_prominence: f64) -> usize {
        count_prominent_maxima(&self.density, rel_prominence)
    }
}

/// Local maxima of `v` whose topographic prominence exceeds `rel · max(v)`.
/// Plateaus and ties count once.
pub fn count_prominent_maxima(v: &[f64], rel: f64) -> usize {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = rel * top.abs();
    let mut s: Vec<f64> = Vec::with_capacity(v.len());
    for &x in v {
        if s.last() != Some(&x) {
            s.push(x);
        }
    }
    let mut count = 0;
    for i in 0..s.len() {
        if (i > 0 && s[i - 1] > s[i]) || (i + 1 < s.len() && s[i + 1] > s[i]) {
            continue;
        }
        // Ties are broken toward the left, so equal peaks count once.
        let (mut lmin, mut j) = (s[i], i);
        while j > 0 && s[j - 1] < s[i] {
            j -= 1;
            lmin = lmin.min(s[j]);
        }
        let left_col = (j > 0).then_some(lmin);
        let (mut rmin, mut k) = (s[i], i);
        while k + 1 < s.len() && s[k + 1] <= s[i] {
            k += 1;
            rmin = rmin.min(s[k]);
        }
        let right_col = (k + 1 < s.len()).then_some(rmin);
        let prominence = match (left_col, right_col) {
            (Some(l), Some(r)) => s[i] - l.max(r),
            (Some(c), None) | (None, Some(c)) => s[i] - c,
            (None, None) => f64::INFINITY,
        };
        if prominence > tol {
            count += 1;
        }
    }
    count
}

/// Silverman's rule `0.9 min(σ, IQR/1.34) n^{−1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if i + 1 < s.len() {
            s[i] * (1.0 - f) + s[i + 1] * f
        } else {
            s[i]
        }
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian-kernel KDE on `n` points of `[lo, hi]`, renormalized by trapezoid.
pub fn kde(samples: &[f64], bandwidth: f64, lo: f64, hi: f64, n: usize) -> Result<DensityGrid, DensityError> {
    if samples.len() < 2 {
        return Err(DensityError::Invalid("kde needs at least two samples".into()));
    }
    if !(bandwidth > 0.0) || !(hi > lo) || n < 2 {
        return Err(DensityError::Invalid("kde needs bandwidth > 0, hi > lo and at least two grid points".into()));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let x = linspace(lo, hi, n);
    let raw: Vec<f64> = x
        .iter()
        .map(|&xi| norm * samples.iter().map(|&s| (-0.5 * ((xi - s) / bandwidth).powi(2)).exp()).sum::<f64>())
        .collect();
    let w = trapezoid_weights(n, lo, hi);
    let z: f64 = w.iter().zip(&raw).map(|(a, b)| a * b).sum();
    if !(z > 0.0) {
        return Err(DensityError::Invalid("all samples lie far outside the grid".into()));
    }
    let density: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let log_density = density.iter().map(|v| v.ln()).collect();
    Ok(DensityGrid { lo, hi, x, density, log_density })
}

/// Grid-normalized density of a 1D model; `scale` maps grid units to model units.
pub fn normalize_logdensity(model: &LseModel, lo: f64, hi: f64, n: usize, scale: f64) -> Result<DensityGrid, DensityError> {
    if model.input_dim() != 1 {
        return Err(DensityError::Invalid(format!("density model must be 1D, got {} inputs", model.input_dim())));
    }
    let logs = linspace(lo, hi, n)
        .into_iter()
        .map(|x| model.forward(&[x / scale]).map_err(|e| DensityError::Invalid(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DensityGrid::from_log_values(lo, hi, logs))
}

/// Trapezoid of `p log(p/q)` with `q` floored at 1e-300.
pub fn kl_divergence(p: &DensityGrid, q: &DensityGrid) -> Result<f64, DensityError> {
    if p.x.len() != q.x.len() || p.lo != q.lo || p.hi != q.hi {
        return Err(DensityError::GridMismatch(format!(
            "[{}, {}]×{} vs [{}, {}]×{}",
            p.lo,
            p.hi,
            p.x.len(),
            q.lo,
            q.hi,
            q.x.len()
        )));
    }
    let w = trapezoid_weights(p.x.len(), p.lo, p.hi);
    Ok(w.iter()
        .zip(&p.density)
        .zip(&q.density)
        .map(|((wk, &pk), &qk)| if pk > 0.0 { wk * pk * (pk / qk.max(1e-300)).ln() } else { 0.0 })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityFitConfig {
    pub n_modes: usize,
    pub n_hidden_layers: usize,
    pub hidden_width: usize,
    pub kl_weight: f64,
    pub n_grid: usize,
    /// Grid upper end as a multiple of the largest sample.
    pub grid_max_factor: f64,
    pub train: TrainConfig,
}

impl DensityFitConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self { n_modes: 5, n_hidden_layers: 2, hidden_width: 10, kl_weight: 0.01, n_grid: 512, grid_max_factor: 1.2, train }
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        if !(self.kl_weight >= 0.0) {
            return Err(DensityError::Invalid("kl_weight must be >= 0".into()));
        }
        if self.n_grid < 2 || !(self.grid_max_factor >= 1.0) {
            return Err(DensityError::Invalid("need n_grid >= 2 and grid_max_factor >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DensityFit {
    pub model: LseModel,
    /// Density in sample units on `[0, grid_max_factor · max]`.
    pub grid: DensityGrid,
    pub history: TrainHistory,
    /// Samples are divided by this before reaching the model.
    pub scale: f64,
}

/// Fits non-negative scalar samples on `[0, grid_max_factor · max]`.
pub fn fit_density(samples: &[f64], config: &DensityFitConfig) -> Result<DensityFit, DensityError> {
    let hi = config.grid_max_factor * samples.iter().copied().fold(0.0, f64::max);
    fit_density_on(samples, 0.0, if hi > 0.0 { hi } else { 1.0 }, config)
}

/// Fits samples on an explicit support `[lo, hi]`. The model sees `y / scale`
/// with `scale = max(|lo|, |hi|)`.
pub fn fit_density_on(samples: &[f64], lo: f64, hi: f64, config: &DensityFitConfig) -> Result<DensityFit, DensityError> {
    config.validate()?;
    if samples.len() < 10 {
        return Err(DensityError::Invalid(format!("density fit needs at least 10 samples, got {}", samples.len())));
    }
    if let Some(bad) = samples.iter().find(|y| !(lo..=hi).contains(*y)) {
        return Err(DensityError::Invalid(format!("sample {bad} outside grid support [{lo}, {hi}]")));
    }
    let scale = lo.abs().max(hi.abs());
    let u: Vec<f64> = samples.iter().map(|y| y / scale).collect();
    let spec = ElboSpec { lo: lo / scale, hi: hi / scale, n_grid: config.n_grid, kl_weight: config.kl_weight };
    let mconf = ModelConfig { input_dim: 1, n_modes: config.n_modes, n_hidden_layers: config.n_hidden_layers, hidden_width: config.hidden_width };
    let mut model = LseModel::new(mconf, config.train.seed).map_err(|e| DensityError::Invalid(e.to_string()))?;
    let tc = TrainConfig { loss_kind: LossKind::Elbo(spec), ..config.train };
    let history = train(&mut model, &Dataset::samples(&u)?, &tc)?;
    let grid = normalize_logdensity(&model, lo, hi, config.n_grid, scale)?;
    Ok(DensityFit { model, grid, history, scale })
}

/// One `density.csv` block: KDE and fit on the same grid at time `t`.
pub struct DensityRow<'a> {
    pub t: f64,
    pub kde: &'a DensityGrid,
    pub fit: &'a DensityGrid,
}

pub fn write_density_csv(path: &Path, rows: &[DensityRow<'_>]) -> Result<(), DensityError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "y", "kde", "fit"])?;
    for r in rows {
        if r.kde.x != r.fit.x {
            return Err(DensityError::GridMismatch(format!("snapshot t = {}", r.t)));
        }
        for ((y, k), f) in r.kde.x.iter().zip(&r.kde.density).zip(&r.fit.density) {
            w.write_record([r.t.to_string(), y.to_string(), k.to_string(), f.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Samples as an `n × 1` matrix.
pub fn column(samples: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((samples.len(), 1), samples.to_vec()).expect("column")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_grid(mu: f64, sigma: f64, lo: f64, hi: f64, n: usize) -> DensityGrid {
        let logs = linspace(lo, hi, n).iter().map(|x| -0.5 * ((x - mu) / sigma).powi(2)).collect();
        DensityGrid::from_log_values(lo, hi, logs)
    }

    #[test]
    fn kde_of_a_point_is_the_kernel() {
        let g = kde(&[0.0, 0.0], 1.0, -10.0, 10.0, 2001).unwrap();
        let peak = g.density[1000];
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-9, "{peak}");
        assert!((g.integral() - 1.0).abs() < 1e-12);
        assert_eq!(g.mode_count(0.01), 1);
        assert!(kde(&[1.0], 1.0, 0.0, 1.0, 10).is_err());
        assert!(kde(&[1.0, 2.0], 0.0, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn silverman_reference_value() {
        // 0..99: σ = √(100·101/12), IQR = 74.25 − 24.75 (linear quantiles).
        let samples: Vec<f64> = (0..100).map(f64::from).collect();
        let sd = (100.0 * 101.0 / 12.0f64).sqrt();
        let expected = 0.9 * sd.min(49.5 / 1.34) * 100f64.powf(-0.2);
        assert!((silverman_bandwidth(&samples) - expected).abs() < 1e-12);
    }

    #[test]
    fn normalization_matches_standard_normal() {
        let g = gaussian_grid(0.0, 1.0, -10.0, 10.0, 2001);
        assert!((g.integral() - 1.0).abs() < 1e-12);
        for (x, p) in g.x.iter().zip(&g.density) {
            let exact = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            assert!((p - exact).abs() < 1e-4);
        }
        let shifted = DensityGrid::from_log_values(-10.0, 10.0, g.log_density.iter().map(|l| l + 123.0).collect());
        assert!(shifted.density.iter().zip(&g.density).all(|(a, b)| (a - b).abs() < 1e-12));
        let flat = DensityGrid::from_log_values(0.0, 4.0, vec![3.0; 50]);
        assert!(flat.density.iter().all(|p| (p - 0.25).abs() < 1e-14));
    }

    #[test]
    fn kl_of_shifted_normals() {
        let (sigma, delta) = (0.7, 0.9);
        let p = gaussian_grid(0.0, sigma, -12.0, 12.0, 4001);
        let q = gaussian_grid(delta, sigma, -12.0, 12.0, 4001);
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - delta * delta / (2.0 * sigma * sigma)).abs() < 1e-3, "{kl}");
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let r = gaussian_grid(0.5, 1.5, -12.0, 12.0, 4001);
        assert!((kl_divergence(&p, &r).unwrap() - kl_divergence(&r, &p).unwrap()).abs() > 1e-3);
        assert!(kl_divergence(&p, &gaussian_grid(0.0, 1.0, -12.0, 12.0, 11)).is_err());
    }

    #[test]
    fn prominence_filter() {
        assert_eq!(count_prominent_maxima(&[0.0, 1.0, 0.0, 2.0, 0.0], 0.1), 2);
        assert_eq!(count_prominent_maxima(&[0.0, 1.0, 0.99, 1.0, 0.0], 0.1), 1);
        assert_eq!(count_prominent_maxima(&[3.0, 2.0, 1.0, 2.0, 0.0], 0.1), 2);
        assert_eq!(count_prominent_maxima(&[1.0, 1.0, 1.0], 0.1), 1);
        assert_eq!(count_prominent_maxima(&[0.0, 1.0, 1.0, 0.0], 0.1), 1);
    }

    fn short_config(epochs: usize, kl_weight: f64) -> DensityFitConfig {
        let mut tc = TrainConfig::desk(LossKind::Value, 11);
        tc.epochs = epochs;
        tc.lr_network = 1e-2;
        tc.lr_gate_scale = 1e-3;
        DensityFitConfig { n_grid: 128, kl_weight, ..DensityFitConfig::new(tc) }
    }

    #[test]
    fn fit_rejects_bad_samples() {
        let cfg = short_config(10, 0.0);
        assert!(fit_density(&[1.0; 5], &cfg).is_err());
        let s: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let err = fit_density_on(&s, 0.0, 10.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("outside grid support"), "{err}");
    }

    #[test]
    fn uniform_samples_fit_flat_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..5000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fit = fit_density_on(&s, 0.0, 1.0, &short_config(1500, 0.0)).unwrap();
        assert!((fit.grid.integral() - 1.0).abs() < 1e-8);
        let sup = fit.grid.density.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
        assert!(sup <= 0.1, "sup-norm deviation {sup}");
        let l = &fit.history.loss;
        assert!(l[99] < l[0]);
    }

    #[test]
    fn bimodal_samples_fit_two_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = |rng: &mut ChaCha8Rng| {
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let s: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 3.0 + 0.5 * normal(&mut rng) } else { 7.0 + 0.5 * normal(&mut rng) }).collect();
        let fit = fit_density_on(&s, 0.0, 10.0, &short_config(3000, 0.01)).unwrap();
        assert_eq!(fit.grid.mode_count(0.01), 2);
    }
}
