//! Variance schedule β_t and its cumulative products, shared by the
//! Gaussian and Bernoulli chains.
//!
//! Timesteps are 1-based in the API (t ∈ 1..=T); storage is 0-based.

use crate::error::{Error, Result};

/// Immutable β_t / ᾱ_t tables for a T-step diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_min: f64,
    beta_max: f64,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_min` at t=1 to `beta_max` at t=T.
    ///
    /// Rejects T=0 and endpoints outside (0,1). With T=1 the single β is
    /// `beta_min` and the endpoints must coincide.
    pub fn linear(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min < 1.0 && beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "schedule endpoints must lie in (0,1), got ({beta_min}, {beta_max})"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::Config(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }
        if t_steps == 1 && beta_min != beta_max {
            return Err(Error::Config(
                "a single-step schedule needs equal endpoints".into(),
            ));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas_unchecked(betas, beta_min, beta_max))
    }

    /// Builds a schedule from explicit β values. Values must lie in [0,1);
    /// β=0 is permitted here so tests can construct degenerate noiseless
    /// steps, which `linear` forbids.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::Config("all betas must lie in [0,1)".into()));
        }
        let (min, max) = (betas[0], betas[betas.len() - 1]);
        Ok(Self::from_betas_unchecked(betas, min, max))
    }

    fn from_betas_unchecked(betas: Vec<f64>, beta_min: f64, beta_max: f64) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        NoiseSchedule { betas, alpha_bars, beta_min, beta_max }
    }

    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty schedules
    }

    /// Endpoints the schedule was built from, for serialization.
    pub fn endpoints(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.len(), "timestep {t} outside 1..={}", self.len());
        self.betas[t - 1]
    }

    /// ᾱ_t = ∏_{s≤t}(1−β_s) for t in 1..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.len(), "timestep {t} outside 1..={}", self.len());
        self.alpha_bars[t - 1]
    }

    /// ᾱ_t extended with the ᾱ_0 := 1 convention.
    pub fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar(t)
        }
    }

    /// Posterior variance β̃_t = β_t (1−ᾱ_{t−1}) / (1−ᾱ_t); zero at t=1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let beta = self.beta(t);
        beta * (1.0 - self.alpha_bar_or_one(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_endpoints_by_construction() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
    }

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn four_step_product_matches_explicit_multiplication() {
        // oracle: direct product evaluation
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let expected = 0.9 * 0.8 * 0.7 * 0.6;
        assert!((s.alpha_bar(4) - expected).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_at_t1_is_one_minus_beta1() {
        let s = NoiseSchedule::linear(16, 0.01, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
    }

    #[test]
    fn default_schedule_terminal_alpha_bar_near_zero() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn rejects_bad_configurations() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
    }

    #[test]
    fn recurrence_holds_within_ulp_scale() {
        let s = NoiseSchedule::linear(500, 2e-4, 0.05).unwrap();
        for t in 2..=500 {
            let lhs = s.alpha_bar(t);
            let rhs = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            assert!(
                (lhs - rhs).abs() <= 2.0 * f64::EPSILON * rhs.abs().max(1.0),
                "recurrence broken at t={t}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing_on_random_schedules() {
        let mut rng = crate::rng::substream(11, crate::rng::STREAM_DATA);
        for _ in 0..50 {
            let t_steps = rng.random_range(2..200);
            let lo: f64 = rng.random_range(1e-5..0.4);
            let hi: f64 = rng.random_range(lo..0.5);
            let s = NoiseSchedule::linear(t_steps, lo, hi).unwrap();
            for t in 2..=t_steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            assert!(s.alpha_bar(t_steps) > 0.0);
        }
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn out_of_range_timestep_panics() {
        let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        let _ = s.alpha_bar(11);
    }

    #[test]
    fn posterior_variance_zero_at_t1() {
        let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!(s.posterior_variance(2) > 0.0);
    }
}
