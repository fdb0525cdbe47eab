//! Differentiation machinery: forward-mode dual numbers for exact input
//! derivatives, a reverse-mode tape for parameter gradients, and a
//! central-difference checker used as an independent oracle.

mod real;
mod store;
mod tape;

pub use real::{sigmoid, softplus, softplus_with_slope, Dual, Real};
pub use store::{ParamSlice, ParamStore, SliceId};
pub use tape::{eval_with_param_grad, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("domain error in `{op}`: argument {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("objective must be 1x1, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("objective evaluated to a non-finite value")]
    NonFinite,
    #[error("direction must have unit norm, got |d| = {0}")]
    NotUnit(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A scalar function of a real vector that can be evaluated on any
/// [`Real`], which makes it differentiable with dual numbers.
pub trait ScalarField {
    fn input_dim(&self) -> usize;
    fn eval<T: Real>(&self, x: &[T]) -> T;
}

/// `∇f(x)·d` computed exactly with one dual-number pass.
pub fn directional_input_derivative<F: ScalarField + ?Sized>(
    f: &F,
    x: &[f64],
    d: &[f64],
) -> Result<f64, AutodiffError> {
    if x.len() != f.input_dim() {
        return Err(AutodiffError::Dimension { expected: f.input_dim(), got: x.len() });
    }
    if d.len() != x.len() {
        return Err(AutodiffError::Dimension { expected: x.len(), got: d.len() });
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(AutodiffError::NotUnit(norm));
    }
    let out = f.eval(&Dual::seed(x, d));
    if !out.value.is_finite() || !out.tangent.is_finite() {
        return Err(AutodiffError::NonFinite);
    }
    Ok(out.tangent)
}

/// Full input gradient by one dual pass per coordinate.
pub fn dual_gradient<F: ScalarField + ?Sized>(f: &F, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut e = vec![0.0; n];
    (0..n)
        .map(|j| {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            f.eval(&Dual::seed(x, &e)).tangent
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    fn from_pairs(pairs: impl Iterator<Item = (usize, f64, f64)>) -> Self {
        let mut worst: Option<GradCheckReport> = None;
        for (i, analytic, numeric) in pairs {
            let err = relative_error(analytic, numeric);
            if worst.is_none_or(|w| err > w.max_rel_error) {
                worst = Some(GradCheckReport { max_rel_error: err, worst_index: i, analytic, numeric });
            }
        }
        worst.unwrap_or(GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 })
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the dual-number input gradient of `f` at `x` against central
/// differences with the given step, coordinate by coordinate.
pub fn finite_difference_check<F: ScalarField + ?Sized>(f: &F, x: &[f64], step: f64) -> GradCheckReport {
    assert!(step > 0.0, "step must be positive");
    let analytic = dual_gradient(f, x);
    let mut xp = x.to_vec();
    GradCheckReport::from_pairs((0..x.len()).map(|j| {
        xp[j] = x[j] + step;
        let fp: f64 = f.eval(&xp);
        xp[j] = x[j] - step;
        let fm: f64 = f.eval(&xp);
        xp[j] = x[j];
        (j, analytic[j], (fp - fm) / (2.0 * step))
    }))
}

/// Central-difference check of a parameter gradient on a subset of indices.
pub fn param_gradient_check<F>(objective: F, params: &[f64], analytic: &[f64], indices: &[usize], step: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "step must be positive");
    let mut p = params.to_vec();
    GradCheckReport::from_pairs(indices.iter().map(|&j| {
        p[j] = params[j] + step;
        let fp = objective(&p);
        p[j] = params[j] - step;
        let fm = objective(&p);
        p[j] = params[j];
        (j, analytic[j], (fp - fm) / (2.0 * step))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl ScalarField for Square {
        fn input_dim(&self) -> usize {
            1
        }
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x[0] * x[0]
        }
    }

    struct Product;
    impl ScalarField for Product {
        fn input_dim(&self) -> usize {
            2
        }
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x[0] * x[1]
        }
    }

    struct Abs;
    impl ScalarField for Abs {
        fn input_dim(&self) -> usize {
            1
        }
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x[0].abs()
        }
    }

    struct LogOf;
    impl ScalarField for LogOf {
        fn input_dim(&self) -> usize {
            1
        }
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x[0].ln()
        }
    }

    #[test]
    fn directional_examples() {
        assert_eq!(directional_input_derivative(&Square, &[2.0], &[1.0]).unwrap(), 4.0);
        assert_eq!(directional_input_derivative(&Product, &[3.0, 5.0], &[1.0, 0.0]).unwrap(), 5.0);
    }

    #[test]
    fn directional_errors() {
        assert!(matches!(
            directional_input_derivative(&Product, &[3.0, 5.0], &[1.0, 1.0]),
            Err(AutodiffError::NotUnit(_))
        ));
        assert!(matches!(
            directional_input_derivative(&Product, &[3.0], &[1.0]),
            Err(AutodiffError::Dimension { .. })
        ));
        assert_eq!(
            directional_input_derivative(&LogOf, &[-1.0], &[1.0]),
            Err(AutodiffError::NonFinite)
        );
    }

    #[test]
    fn fd_check_smooth_and_kink() {
        let r = finite_difference_check(&Square, &[1.0], 1e-5);
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        let kink = finite_difference_check(&Abs, &[0.0], 1e-5);
        assert!(kink.max_rel_error > 0.5, "{kink:?}");
    }

    #[test]
    fn param_check_reports_worst() {
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[1];
        let r = param_gradient_check(f, &[2.0, 1.0], &[4.0, 2.5], &[0, 1], 1e-5);
        assert_eq!(r.worst_index, 1);
        assert!((r.numeric - 3.0).abs() < 1e-8);
    }
}
