//! Gaussian mean-shift observation model and its log-likelihood-ratio statistics.
//!
//! Before the change `X_k ~ N(m0, σ²)`, afterwards `X_k ~ N(m1, σ²)`. The
//! log-likelihood ratio is evaluated in closed form,
//!
//! ```text
//! Z = (m1 - m0) / σ² · (x - (m0 + m1) / 2)
//! ```
//!
//! which never forms the density ratio and so cannot overflow.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::SimRng;

/// Which law generates an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// `f0`, no change has happened.
    Pre,
    /// `f1`, after the change.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeModel {
    pub m0: f64,
    pub m1: f64,
    pub sigma: f64,
}

/// Moments of the log-likelihood ratio `Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlrStats {
    /// Kullback–Leibler divergence `E1[Z]`.
    pub i_kl: f64,
    /// `E0[Z] = -i0`.
    pub i0: f64,
    /// `E1[Z²]`.
    pub z_second_moment_post: f64,
    /// `Var1[Z]`.
    pub z_variance_post: f64,
}

impl ChangeModel {
    pub fn new(m0: f64, m1: f64, sigma: f64) -> Result<Self> {
        ensure_finite("m0", m0)?;
        ensure_finite("m1", m1)?;
        ensure_finite("sigma", sigma)?;
        if sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self { m0, m1, sigma })
    }

    /// Mean of the given hypothesis.
    pub fn mean(&self, hypothesis: Hypothesis) -> f64 {
        match hypothesis {
            Hypothesis::Pre => self.m0,
            Hypothesis::Post => self.m1,
        }
    }

    #[inline]
    fn llr_slope(&self) -> f64 {
        (self.m1 - self.m0) / (self.sigma * self.sigma)
    }

    /// Closed-form `log f1(x)/f0(x)`; rejects non-finite samples.
    pub fn loglik_ratio(&self, x: f64) -> Result<f64> {
        ensure_finite("observation", x)?;
        Ok(self.llr(x))
    }

    /// Unchecked variant of [`Self::loglik_ratio`] for hot loops fed by [`Self::sample`].
    #[inline]
    pub fn llr(&self, x: f64) -> f64 {
        self.llr_slope() * (x - 0.5 * (self.m0 + self.m1))
    }

    pub fn llr_stats(&self) -> Result<LlrStats> {
        let gap = self.m1 - self.m0;
        if gap == 0.0 {
            return Err(Error::Degenerate("m1 == m0 gives zero KL divergence".into()));
        }
        let z_variance_post = gap * gap / (self.sigma * self.sigma);
        let i_kl = 0.5 * z_variance_post;
        Ok(LlrStats {
            i_kl,
            i0: i_kl,
            z_second_moment_post: z_variance_post + i_kl * i_kl,
            z_variance_post,
        })
    }

    /// `E0[exp(γ Z)] = exp(γ(γ-1)·(m1-m0)²/(2σ²))`.
    pub fn pre_change_mgf(&self, gamma: f64) -> f64 {
        let gap = self.m1 - self.m0;
        (gamma * (gamma - 1.0) * gap * gap / (2.0 * self.sigma * self.sigma)).exp()
    }

    #[inline]
    pub fn sample(&self, hypothesis: Hypothesis, rng: &mut SimRng) -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        self.mean(hypothesis) + self.sigma * n
    }

    /// Draws an observation and returns its log-likelihood ratio.
    #[inline]
    pub fn sample_llr(&self, hypothesis: Hypothesis, rng: &mut SimRng) -> f64 {
        self.llr(self.sample(hypothesis, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Lane};
    use crate::stats::Moments;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn reference_model() -> ChangeModel {
        ChangeModel::new(0.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn llr_closed_form_values() {
        let m = reference_model();
        assert_eq!(m.loglik_ratio(0.25).unwrap(), 0.0);
        assert_relative_eq!(m.loglik_ratio(1.0).unwrap(), 0.375, epsilon = 1e-15);
        assert!(m.loglik_ratio(f64::NAN).is_err());
        assert!(m.loglik_ratio(f64::INFINITY).is_err());
    }

    #[test]
    fn llr_matches_log_density_ratio() {
        let m = ChangeModel::new(-0.3, 1.1, 0.7).unwrap();
        let logpdf = |x: f64, mu: f64| -0.5 * ((x - mu) / m.sigma).powi(2);
        for x in [-2.0, -0.1, 0.4, 3.3] {
            assert_relative_eq!(m.llr(x), logpdf(x, m.m1) - logpdf(x, m.m0), epsilon = 1e-12);
        }
    }

    #[test]
    fn stats_for_table_setup() {
        let s = reference_model().llr_stats().unwrap();
        assert_relative_eq!(s.i_kl, 0.125, epsilon = 1e-15);
        assert_relative_eq!(s.i0, 0.125, epsilon = 1e-15);
        assert_relative_eq!(s.z_variance_post, 0.25, epsilon = 1e-15);
        assert_relative_eq!(s.z_second_moment_post, 0.265625, epsilon = 1e-15);
    }

    #[test]
    fn stats_shift_invariant() {
        let a = ChangeModel::new(0.0, 1.4, 0.9).unwrap().llr_stats().unwrap();
        let b = ChangeModel::new(-0.7, 0.7, 0.9).unwrap().llr_stats().unwrap();
        assert_relative_eq!(a.i_kl, b.i_kl, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_and_invalid_models() {
        assert!(matches!(
            ChangeModel::new(1.0, 1.0, 1.0).unwrap().llr_stats(),
            Err(Error::Degenerate(_))
        ));
        assert!(ChangeModel::new(0.0, 1.0, 0.0).is_err());
        assert!(ChangeModel::new(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let m = reference_model();
        let a = m.sample(Hypothesis::Post, &mut stream(1, 0, Lane::Observation));
        let b = m.sample(Hypothesis::Post, &mut stream(1, 0, Lane::Observation));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments() {
        let m = reference_model();
        let n = 1_000_000;
        let mut rng = stream(11, 0, Lane::Observation);
        let post = Moments::from_slice(&(0..n).map(|_| m.sample(Hypothesis::Post, &mut rng)).collect::<Vec<_>>());
        assert!((post.mean() - 0.5).abs() < 4.0 / (n as f64).sqrt());
        let pre = Moments::from_slice(&(0..n).map(|_| m.sample(Hypothesis::Pre, &mut rng)).collect::<Vec<_>>());
        assert!((pre.variance() - 1.0).abs() < 0.01);
    }

    #[test]
    fn mean_llr_equals_plus_minus_kl() {
        let m = reference_model();
        let s = m.llr_stats().unwrap();
        let mut rng = stream(12, 0, Lane::Observation);
        for (h, target) in [(Hypothesis::Post, s.i_kl), (Hypothesis::Pre, -s.i0)] {
            let z: Vec<f64> = (0..1_000_000).map(|_| m.sample_llr(h, &mut rng)).collect();
            let mo = Moments::from_slice(&z);
            assert!((mo.mean() - target).abs() < 4.0 * mo.stderr(), "{h:?}: {}", mo.mean());
        }
    }

    #[test]
    fn pre_change_mgf_is_one_at_zero_and_one() {
        let m = reference_model();
        assert_eq!(m.pre_change_mgf(0.0), 1.0);
        assert_eq!(m.pre_change_mgf(1.0), 1.0);
        assert!(m.pre_change_mgf(0.5) < 1.0);
    }

    proptest! {
        #[test]
        fn llr_strictly_increasing(m0 in -3.0f64..3.0, gap in 0.01f64..4.0, sigma in 0.1f64..5.0,
                                   x in -50.0f64..50.0, dx in 1e-6f64..10.0) {
            let m = ChangeModel::new(m0, m0 + gap, sigma).unwrap();
            prop_assert!(m.llr(x + dx) > m.llr(x));
        }

        #[test]
        fn stats_identities(m0 in -3.0f64..3.0, gap in 0.01f64..4.0, sigma in 0.1f64..5.0) {
            let s = ChangeModel::new(m0, m0 + gap, sigma).unwrap().llr_stats().unwrap();
            prop_assert!(s.i_kl > 0.0);
            prop_assert!((s.z_variance_post - gap * gap / (sigma * sigma)).abs() <= 1e-12 * s.z_variance_post);
            prop_assert!((s.i_kl - s.z_variance_post / 2.0).abs() <= 1e-12 * s.i_kl);
            prop_assert!(s.z_second_moment_post - s.i_kl * s.i_kl >= 0.0);
        }
    }
}
