//! Probability vectors, temperature softmax, KL divergence, and the clamped
//! negative cosine used as the gradient-conflict signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the second KL argument before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// A finite non-negative vector summing to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < -1e-12 || *p > 1.0 + 1e-9) {
            return Err(Error::InvalidArgument(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { probs })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Temperature softmax, stabilized by max subtraction.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<ProbVector> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("softmax scores must be finite".into()));
    }
    let probs = softmax_unchecked(scores, temperature);
    ProbVector::new(probs)
}

/// Softmax without argument validation, for hot paths with known-good inputs.
pub fn softmax_unchecked(scores: &[f64], temperature: f64) -> Vec<f64> {
    let inv_t = 1.0 / temperature;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| ((s - max) * inv_t).exp()).collect();
    let sum: f64 = out.iter().sum();
    let inv = 1.0 / sum;
    for p in &mut out {
        *p *= inv;
    }
    out
}

/// KL(p || q) = sum_i p_i ln(p_i / q_i), with 0 ln(0/.) = 0 and q clamped at
/// [`KL_FLOOR`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(KL_FLOOR)).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Clamped negative cosine: max(0, -<g, g_bar> / (|g| |g_bar| + eps)).
/// Returns 0 when either vector is all-zero.
pub fn clamped_neg_cosine(g: &[f64], g_bar: &[f64], epsilon: f64) -> Result<f64> {
    if g.len() != g_bar.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine length mismatch: {} vs {}",
            g.len(),
            g_bar.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for (&a, &b) in g.iter().zip(g_bar.iter()) {
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(0.0);
    }
    let c = -dot / (n1.sqrt() * n2.sqrt() + epsilon);
    Ok(c.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_example_values() {
        // exp-sum evaluation of (2, 1, 0) at T = 1
        let p = softmax(&[2.0, 1.0, 0.0], 1.0).unwrap();
        let expect = [0.66524, 0.24473, 0.09003];
        for (a, e) in p.as_slice().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
        // logit gap 1 after temperature scaling gives ratio e
        let p = softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p.as_slice()[0] - 0.73106).abs() < 1e-5);
        assert!((p.as_slice()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_constant_scores_are_uniform() {
        for t in [0.07, 1.0, 5.0] {
            let p = softmax(&[3.25; 4], t).unwrap();
            for &v in p.as_slice() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_arguments() {
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
        assert!(softmax(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn kl_example_values() {
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);

        // both log-ratios are +-1 when p = sigmoid(1)
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        let q = softmax(&[0.0, 1.0], 1.0).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - 0.46212).abs() < 1e-5, "{kl}");

        let point = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&point, &half).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);

        let three = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(kl_divergence(&half, &three).is_err());
    }

    #[test]
    fn cosine_example_values() {
        let g = [1.0, 2.0, 3.0];
        assert_eq!(clamped_neg_cosine(&g, &g, 1e-8).unwrap(), 0.0);

        let c = clamped_neg_cosine(&[1.0, 0.0], &[-1.0, 1.0], 1e-12).unwrap();
        assert!((c - 0.70711).abs() < 1e-5);

        assert_eq!(clamped_neg_cosine(&[1.0, 0.0], &[0.0, 1.0], 1e-8).unwrap(), 0.0);
        assert_eq!(clamped_neg_cosine(&[0.0, 0.0], &[1.0, 0.0], 1e-8).unwrap(), 0.0);
        assert!(clamped_neg_cosine(&[1.0], &[1.0, 2.0], 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            scores in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
            t in 0.05f64..4.0,
        ) {
            let p = softmax(&scores, t).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);

            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax(&shifted, t).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_nonnegative_zero_iff_equal(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..8),
        ) {
            let s1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s2: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let p = softmax(&s1, 1.0).unwrap();
            let q = softmax(&s2, 1.0).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            let far = p.as_slice().iter().zip(q.as_slice()).any(|(a, b)| (a - b).abs() > 1e-6);
            if far {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn cosine_scale_invariant(
            pairs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..6),
            lam in 0.01f64..100.0,
            mu in 0.01f64..100.0,
        ) {
            let g: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let h: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = clamped_neg_cosine(&g, &h, 1e-12).unwrap();
            let gs: Vec<f64> = g.iter().map(|v| v * lam).collect();
            let hs: Vec<f64> = h.iter().map(|v| v * mu).collect();
            let scaled = clamped_neg_cosine(&gs, &hs, 1e-12).unwrap();
            prop_assert!((base - scaled).abs() < 1e-7);
        }
    }
}
