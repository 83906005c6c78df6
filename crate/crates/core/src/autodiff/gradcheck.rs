use std::collections::BTreeMap;
use std::fmt::Debug;

use super::matrix::Matrix;
use super::tape::Gradients;
use crate::error::{Error, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`
/// so coordinates with vanishing gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport<K> {
    pub max_rel_err: f64,
    /// parameter and flat index of the worst coordinate
    pub worst: Option<(K, usize)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` around `params`,
/// one coordinate at a time.
///
/// `f` must be a pure function of the parameters; it is evaluated twice at
/// the base point and a mismatch is reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<K, F>(
    mut f: F,
    params: &BTreeMap<K, Matrix>,
    analytic: &Gradients<K>,
    step: f64,
) -> Result<GradCheckReport<K>>
where
    K: Ord + Clone + Debug,
    F: FnMut(&BTreeMap<K, Matrix>) -> Result<f64>,
{
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (key, value) in params {
        let grad = analytic
            .get(key)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {key:?}")))?;
        if grad.shape() != value.shape() {
            return Err(Error::shape("finite_diff_check", grad.shape(), value.shape()));
        }
        for idx in 0..value.as_slice().len() {
            let base = value.as_slice()[idx];
            work.get_mut(key).unwrap().as_mut_slice()[idx] = base + step;
            let plus = f(&work)?;
            work.get_mut(key).unwrap().as_mut_slice()[idx] = base - step;
            let minus = f(&work)?;
            work.get_mut(key).unwrap().as_mut_slice()[idx] = base;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.as_slice()[idx], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((key.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn single(v: f64) -> BTreeMap<&'static str, Matrix> {
        BTreeMap::from([("theta", Matrix::scalar(v))])
    }

    #[test]
    fn square_at_three() {
        let params = single(3.0);
        let analytic = BTreeMap::from([("theta", Matrix::scalar(6.0))]);
        let f = |p: &BTreeMap<&str, Matrix>| Ok(p["theta"].as_slice()[0].powi(2));
        let report = finite_diff_check(f, &params, &analytic, 1e-5).unwrap();
        // |numeric - 6| <= 1e-8
        assert!(report.max_rel_err * 6.0 <= 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_zero_gradients() {
        let params = single(-2.0);
        let analytic = BTreeMap::from([("theta", Matrix::scalar(0.0))]);
        let report = finite_diff_check(|_| Ok(4.25), &params, &analytic, 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let params = single(1.0);
        let analytic = BTreeMap::from([("theta", Matrix::scalar(0.0))]);
        let calls = Cell::new(0.0);
        let f = |_: &BTreeMap<&str, Matrix>| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        let err = finite_diff_check(f, &params, &analytic, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn wrong_gradient_detected() {
        let params = single(3.0);
        let analytic = BTreeMap::from([("theta", Matrix::scalar(5.0))]);
        let f = |p: &BTreeMap<&str, Matrix>| Ok(p["theta"].as_slice()[0].powi(2));
        let report = finite_diff_check(f, &params, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_err > 0.1);
        assert_eq!(report.worst, Some(("theta", 0)));
    }
}
