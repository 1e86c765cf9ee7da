//! Variance-exploding diffusion process under the identity noise schedule.
//!
//! Time and noise level coincide: `sigma(t) = t`, hence
//! `g(t)^2 = d sigma^2 / dt = 2t`. The denoiser and the score are related by
//! Tweedie's formula `score = (denoised - x) / sigma^2`, which this module
//! exposes in both directions together with the drift terms of the backward
//! SDE and the probability-flow ODE.
//!
//! All operations are pure functions of their inputs and are safe to call
//! concurrently.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A point of the data (or noised-data) space: a flat vector of channels.
pub type DataPoint = Vec<f64>;

/// Noise schedule of the diffusion process, `sigma(t) = t` on
/// `[sigma_min, sigma_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 15.0,
        }
    }
}

fn check_same_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_min must be positive and finite, got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max must exceed sigma_min, got {}",
                self.sigma_max
            )));
        }
        Ok(())
    }

    /// Noise level at time `t`. Identity mapping, valid on `[0, sigma_max]`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Domain {
                what: "sigma_at: t",
                value: t,
            });
        }
        if t > self.sigma_max {
            return Err(Error::Domain {
                what: "sigma_at: t above sigma_max",
                value: t,
            });
        }
        Ok(t)
    }

    /// Squared diffusion coefficient `g(t)^2 = d sigma^2 / dt = 2t`.
    pub fn g_squared_at(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::Domain {
                what: "g_squared_at: t",
                value: t,
            });
        }
        Ok(2.0 * t)
    }

    /// Forward perturbation: `x0 + sigma(t) * z` for a standard normal draw `z`.
    pub fn perturb(&self, x0: &[f64], t: f64, z: &[f64]) -> Result<DataPoint> {
        check_same_len("perturb: z", x0.len(), z.len())?;
        if !t.is_finite() || t < self.sigma_min || t > self.sigma_max {
            return Err(Error::Domain {
                what: "perturb: t outside schedule range",
                value: t,
            });
        }
        Ok(x0.iter().zip(z).map(|(x, n)| x + t * n).collect())
    }

    /// Tweedie's formula: `score = (denoised - x) / sigma(t)^2`.
    pub fn score_from_denoiser(&self, denoised: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_same_len("score_from_denoiser: x", denoised.len(), x.len())?;
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::Domain {
                what: "score_from_denoiser: t",
                value: t,
            });
        }
        let var = t * t;
        Ok(denoised.iter().zip(x).map(|(h, x)| (h - x) / var).collect())
    }

    /// Inverse of [`Self::score_from_denoiser`]: `denoised = x + sigma(t)^2 * score`.
    pub fn denoiser_from_score(&self, score: &[f64], x: &[f64], t: f64) -> Result<DataPoint> {
        check_same_len("denoiser_from_score: x", score.len(), x.len())?;
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::Domain {
                what: "denoiser_from_score: t",
                value: t,
            });
        }
        let var = t * t;
        Ok(score.iter().zip(x).map(|(s, x)| x + var * s).collect())
    }

    /// Probability-flow ODE velocity: `dx/dt = -1/2 g(t)^2 * score`.
    pub fn ode_drift(&self, t: f64, score: &[f64]) -> Result<Vec<f64>> {
        let g2 = self.g_squared_at(t)?;
        Ok(score.iter().map(|s| -0.5 * g2 * s).collect())
    }

    /// Backward SDE terms: drift `-g(t)^2 * score` and diffusion scalar `g(t)`.
    /// The Brownian increment is supplied by the integrator.
    pub fn sde_drift_diffusion(&self, t: f64, score: &[f64]) -> Result<(Vec<f64>, f64)> {
        let g2 = self.g_squared_at(t)?;
        let drift = score.iter().map(|s| -g2 * s).collect();
        Ok((drift, g2.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn sigma_is_identity() {
        let s = sched();
        assert_eq!(s.sigma_at(1.0).unwrap(), 1.0);
        assert_eq!(s.sigma_at(15.0).unwrap(), 15.0);
        assert_eq!(s.sigma_at(0.002).unwrap(), 0.002);
    }

    #[test]
    fn sigma_rejects_bad_times() {
        let s = sched();
        assert!(s.sigma_at(-0.1).is_err());
        assert!(s.sigma_at(f64::NAN).is_err());
        assert!(s.sigma_at(16.0).is_err());
    }

    #[test]
    fn g_squared_is_two_t() {
        let s = sched();
        assert_eq!(s.g_squared_at(3.0).unwrap(), 6.0);
        assert_eq!(s.g_squared_at(0.5).unwrap(), 1.0);
        assert_eq!(s.g_squared_at(1.0).unwrap(), 2.0);
        assert!(s.g_squared_at(0.0).is_err());
        assert!(s.g_squared_at(-1.0).is_err());
    }

    #[test]
    fn perturb_matches_examples() {
        let s = sched();
        assert_eq!(s.perturb(&[0.0], 2.0, &[1.0]).unwrap(), vec![2.0]);
        assert_eq!(
            s.perturb(&[1.0, 1.0], 0.002, &[0.0, 0.0]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(s.perturb(&[-1.0], 1.0, &[3.0]).unwrap(), vec![2.0]);
        assert!(s.perturb(&[0.0], 1.0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tweedie_examples() {
        let s = sched();
        assert_eq!(
            s.score_from_denoiser(&[1.0], &[2.0], 1.0).unwrap(),
            vec![-1.0]
        );
        assert_eq!(
            s.score_from_denoiser(&[2.0], &[2.0], 1.0).unwrap(),
            vec![0.0]
        );
        assert_eq!(
            s.score_from_denoiser(&[3.0], &[1.0], 2.0).unwrap(),
            vec![0.5]
        );
        assert!(s.score_from_denoiser(&[1.0], &[1.0], 0.0).is_err());

        assert_eq!(
            s.denoiser_from_score(&[-1.0], &[2.0], 1.0).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            s.denoiser_from_score(&[0.0], &[2.5], 3.0).unwrap(),
            vec![2.5]
        );
    }

    #[test]
    fn drift_examples() {
        let s = sched();
        // g^2 = 2 at t = 1
        assert_eq!(s.ode_drift(1.0, &[-1.0]).unwrap(), vec![1.0]);
        assert_eq!(s.ode_drift(1.0, &[0.0]).unwrap(), vec![0.0]);
        // g^2 = 6 at t = 3
        assert_eq!(s.ode_drift(3.0, &[0.5]).unwrap(), vec![-1.5]);

        let (drift, diff) = s.sde_drift_diffusion(1.0, &[-1.0]).unwrap();
        assert_eq!(drift, vec![2.0]);
        assert!((diff - 2.0_f64.sqrt()).abs() < 1e-15);
        let (drift, diff) = s.sde_drift_diffusion(2.0, &[1.0]).unwrap();
        assert_eq!(drift, vec![-4.0]);
        assert_eq!(diff, 2.0);
    }

    #[test]
    fn ode_drift_is_half_sde_drift() {
        let s = sched();
        let score = [0.3, -1.7, 0.0, 2.2];
        for &t in &[0.01, 0.5, 3.0, 14.9] {
            let ode = s.ode_drift(t, &score).unwrap();
            let (sde, _) = s.sde_drift_diffusion(t, &score).unwrap();
            for (o, d) in ode.iter().zip(&sde) {
                assert_eq!(*o, 0.5 * d);
            }
        }
    }

    #[test]
    fn forward_marginal_variance() {
        // Empirical variance of perturb(x0,t,z) - x0 over 1e5 draws is
        // sigma(t)^2 within 3%.
        let s = sched();
        let mut rng = seed_rng(11);
        for &t in &[0.05, 0.8, 5.0] {
            let n = 100_000;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let xt = s.perturb(&[0.4], t, &[z]).unwrap();
                let d = xt[0] - 0.4;
                sum_sq += d * d;
            }
            let var = sum_sq / n as f64;
            assert!(
                (var - t * t).abs() <= 0.03 * t * t,
                "t={t}: var={var} vs {}",
                t * t
            );
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(1.0, 0.5).is_err());
        assert!(NoiseSchedule::new(0.002, 15.0).is_ok());
    }
}
