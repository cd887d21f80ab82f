//! Finite-difference gradient oracle and the comparison harness used to
//! validate every analytic backward in the crate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step for f64 checks; balances truncation against
/// cancellation error.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Relative tolerance for comparing analytic against numeric gradients.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Elements where both gradients are this small are accepted outright; the
/// relative error of two rounding-noise values means nothing.
pub const ABS_FLOOR: f64 = 1e-8;

/// Outcome of comparing one parameter's analytic gradient against the
/// numeric oracle.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub parameter_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub num_elements_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (max rel {:.3e}, max abs {:.3e}, {} elements, tol {:.1e})",
            self.parameter_name,
            if self.passed { "ok" } else { "FAILED" },
            self.max_rel_error,
            self.max_abs_error,
            self.num_elements_checked,
            self.tolerance,
        )
    }
}

/// Central-difference gradient of a scalar-valued function at `at`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per element.
pub fn numeric_gradient<F>(mut f: F, at: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    let mut grad = Tensor::zeros(at.shape().to_vec());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "function evaluated to a non-finite value near element {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Compare an analytic gradient against its numeric estimate. An element
/// passes when its relative error (against the larger magnitude) is within
/// `tol`, or when both values sit under [`ABS_FLOOR`].
pub fn compare_gradients(
    name: &str,
    analytic: &Tensor<f64>,
    numeric: &Tensor<f64>,
    tol: f64,
) -> GradReport {
    assert_eq!(
        analytic.shape(),
        numeric.shape(),
        "gradient shapes must match for {name}"
    );
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        if a.abs() < ABS_FLOOR && n.abs() < ABS_FLOOR {
            continue;
        }
        max_rel = max_rel.max(abs / a.abs().max(n.abs()));
    }
    GradReport {
        parameter_name: name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        num_elements_checked: analytic.len(),
        tolerance: tol,
        passed: max_rel <= tol,
    }
}

/// Check a set of analytic gradients against central differences.
///
/// `loss` maps the full parameter list to a scalar; `analytic[i]` is the
/// claimed gradient of `loss` w.r.t. `params[i]`. One report per parameter.
pub fn check_gradients<F>(
    loss: F,
    params: &[(&str, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<Vec<GradReport>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::config(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(params.len());
    for (i, ((name, at), grad)) in params.iter().zip(analytic).enumerate() {
        if at.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "analytic gradient for {name} has shape {:?}, parameter has {:?}",
                grad.shape(),
                at.shape()
            )));
        }
        let numeric = numeric_gradient(
            |probe| {
                let mut set = base.clone();
                set[i] = probe.clone();
                loss(&set)
            },
            at,
            eps,
        )?;
        reports.push(compare_gradients(name, grad, &numeric, tol));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_sum_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random_uniform([2, 3], -1.0, 1.0, &mut rng);
        let g = numeric_gradient(|t| Ok(t.sum_f64()), &x, DEFAULT_EPS).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_of_half_squared_norm_is_x() {
        // Quadratic in x: central differences are exact up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::random_uniform([4], -1.0, 1.0, &mut rng);
        let g = numeric_gradient(
            |t| Ok(t.data().iter().map(|v| v * v).sum::<f64>() / 2.0),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        for (&gv, &xv) in g.data().iter().zip(x.data()) {
            assert!((gv - xv).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        // The +eps probe of the first element lands on a pole.
        let x = Tensor::<f64>::filled([2], 1.0);
        let err = numeric_gradient(|t| Ok(1.0 / (t.data()[0] - (1.0 + 1e-5))), &x, 1e-5);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_backward_fails_as_negative_control() {
        // A backward that claims zero gradient for a non-constant function
        // must produce a failing report.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform([3], 0.5, 1.5, &mut rng);
        let zeros = Tensor::<f64>::zeros([3]);
        let reports = check_gradients(
            |p| Ok(p[0].sum_f64()),
            &[("x", x)],
            &[zeros],
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(!reports[0].passed);
    }

    #[test]
    fn tiny_gradients_fall_under_the_absolute_floor() {
        let a = Tensor::<f64>::filled([2], 1e-12);
        let n = Tensor::<f64>::filled([2], -1e-12);
        let report = compare_gradients("tiny", &a, &n, DEFAULT_TOL);
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }
}
