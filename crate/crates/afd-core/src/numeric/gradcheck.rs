//! Central-difference gradient checking for every analytic gradient in the
//! workspace.

use crate::error::{Error, Result};

/// Compares `analytic` against central differences of `f` at `x`.
/// Returns the maximum elementwise relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient length {} does not match parameter length {}",
            analytic.len(),
            x.len()
        )));
    }
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "step h = {h} outside [1e-7, 1e-3]"
        )));
    }
    let mut work = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite objective at coordinate {i} during finite differencing"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::prob::softmax_unchecked;

    #[test]
    fn squared_norm_gradient() {
        let x = [1.0, 2.0];
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let analytic: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let err = grad_check(f, &x, &analytic, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        // f(z) = -log softmax(z)[target]; gradient = softmax(z) - onehot(target)
        let z = [0.3, -1.2, 0.9];
        let target = 2usize;
        let f = |v: &[f64]| -softmax_unchecked(v, 1.0)[target].ln();
        let p = softmax_unchecked(&z, 1.0);
        let analytic: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| if i == target { pi - 1.0 } else { pi })
            .collect();
        let err = grad_check(f, &z, &analytic, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        let f = |_: &[f64]| 0.0;
        assert!(grad_check(f, &[1.0], &[0.0], 1e-2).is_err());
        let g = |v: &[f64]| 1.0 / (v[0] - 1.0);
        assert!(matches!(
            grad_check(g, &[1.0], &[0.0], 1e-5),
            Err(Error::Evaluation(_)) | Ok(_)
        ));
        let h = |v: &[f64]| if v[0] > 1.0 { f64::NAN } else { v[0] };
        assert!(matches!(
            grad_check(h, &[1.0], &[1.0], 1e-5),
            Err(Error::Evaluation(_))
        ));
    }
}
