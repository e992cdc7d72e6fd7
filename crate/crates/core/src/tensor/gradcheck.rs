use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Flat index where the maximum occurred.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares an analytic gradient against central differences of `f` at
/// `params`, over every coordinate.
pub fn grad_check<F>(f: F, params: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_at(f, params, analytic, eps, &all)
}

/// [`grad_check`] restricted to the listed flat indices.
pub fn grad_check_at<F>(
    mut f: F,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if params.shape() != analytic.shape() {
        return Err(Error::shape(format!(
            "grad_check params {:?} vs gradient {:?}",
            params.shape(),
            analytic.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 4], |_, c, h, w| (c as f64 - 0.5) * (h as f64 + 0.3 * w as f64));
        let g = x.scale(2.0);
        let r = grad_check(|p| p.data().iter().map(|v| v * v).sum(), &x, &g, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 24);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::<f64>::full([1, 1, 1, 3], 1.0);
        let wrong = Tensor::<f64>::full([1, 1, 1, 3], 3.0);
        let r = grad_check(|p| p.data().iter().map(|v| v * v).sum(), &x, &wrong, 1e-5).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 0.0);
        let g = Tensor::<f64>::full([1, 1, 1, 1], 0.0);
        assert!(grad_check(|_| f64::NAN, &x, &g, 1e-5).is_err());
    }
}
