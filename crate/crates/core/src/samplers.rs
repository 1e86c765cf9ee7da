//! Generation-time integrators for the backward process: first-order Euler
//! for the probability-flow ODE, Euler-Maruyama for the backward SDE, and a
//! second-order stochastic sampler that temporarily raises the noise level
//! ("churn") before each Heun step.
//!
//! All solvers work directly on noise levels: under the identity schedule the
//! time variable and sigma coincide, and the ODE reduces to
//! `dx/dsigma = (x - denoised(x, sigma)) / sigma`.

use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::DataPoint;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Center of the terminal distribution the sampler starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorCenter {
    /// Pure variance-exploding start, `N(0, sigma_0^2 I)`.
    Zero,
    /// Start centered on the conditioning mean, `N(mu, sigma_0^2 I)`.
    Mu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    pub n_steps: usize,
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub s_noise: f64,
    /// Exponent of the power-law step spacing.
    pub rho: f64,
    /// Smallest nonzero noise level of the grid.
    pub sigma_lo: f64,
    /// Largest noise level of the grid.
    pub sigma_hi: f64,
    pub prior_center: PriorCenter,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            n_steps: 18,
            s_churn: 11.0,
            s_min: 0.05,
            s_max: 15.0,
            s_noise: 1.003,
            rho: 7.0,
            sigma_lo: 0.002,
            sigma_hi: 15.0,
            prior_center: PriorCenter::Mu,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::Config("sampler n_steps must be >= 1".into()));
        }
        if !(self.s_noise > 0.0) {
            return Err(Error::Config(format!(
                "s_noise must be > 0, got {}",
                self.s_noise
            )));
        }
        if !(self.s_min > 0.0 && self.s_min < self.s_max) {
            return Err(Error::Config(format!(
                "churn gate requires 0 < s_min < s_max, got [{}, {}]",
                self.s_min, self.s_max
            )));
        }
        if self.s_churn < 0.0 {
            return Err(Error::Config("s_churn must be >= 0".into()));
        }
        if !(self.sigma_lo > 0.0 && self.sigma_lo < self.sigma_hi) {
            return Err(Error::Config(format!(
                "grid requires 0 < sigma_lo < sigma_hi, got [{}, {}]",
                self.sigma_lo, self.sigma_hi
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be > 0".into()));
        }
        Ok(())
    }

    /// Per-step churn factor: `min(s_churn / n_steps, sqrt(2) - 1)` while
    /// `sigma` lies in `[s_min, s_max]`, else 0.
    pub fn churn_gamma(&self, sigma: f64) -> f64 {
        if sigma >= self.s_min && sigma <= self.s_max {
            (self.s_churn / self.n_steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }

    /// Decreasing noise levels `sigma_0 > ... > sigma_{N-1} > sigma_N = 0`
    /// with power-law spacing in `sigma^(1/rho)`.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        let mut grid = Vec::with_capacity(n + 1);
        if n == 1 {
            grid.push(self.sigma_hi);
        } else {
            let hi = self.sigma_hi.powf(1.0 / self.rho);
            let lo = self.sigma_lo.powf(1.0 / self.rho);
            for i in 0..n {
                let f = i as f64 / (n - 1) as f64;
                grid.push((hi + f * (lo - hi)).powf(self.rho));
            }
        }
        grid.push(0.0);
        grid
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Config("grid needs at least two levels".into()));
    }
    for w in grid.windows(2) {
        if !(w[1] < w[0]) || !w[0].is_finite() {
            return Err(Error::Config(format!(
                "grid must be strictly decreasing, got {} -> {}",
                w[0], w[1]
            )));
        }
    }
    if grid[grid.len() - 1] < 0.0 {
        return Err(Error::Config("grid must end at a level >= 0".into()));
    }
    Ok(())
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampler state at step {step}")));
    }
    Ok(())
}

/// One Euler step of the probability-flow ODE from `sigma` to `sigma_next`.
fn euler_step<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    sigma_next: f64,
    cond: &Conditioning,
) -> Result<DataPoint> {
    let denoised = denoiser.denoise(x, sigma, cond)?;
    Ok(x.iter()
        .zip(&denoised)
        .map(|(xi, di)| xi + (sigma_next - sigma) * (xi - di) / sigma)
        .collect())
}

/// First-order probability-flow ODE solve along `grid`, starting from `start`
/// at `grid[0]`. Deterministic.
pub fn euler_ode_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &[f64],
    grid: &[f64],
    cond: &Conditioning,
) -> Result<DataPoint> {
    check_grid(grid)?;
    let mut x = start.to_vec();
    for i in 0..grid.len() - 1 {
        x = euler_step(denoiser, &x, grid[i], grid[i + 1], cond)?;
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// One Heun step from `sigma` to `sigma_next` (falls back to Euler when the
/// target level is 0, where the slope is not defined).
fn heun_step<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    sigma_next: f64,
    cond: &Conditioning,
) -> Result<DataPoint> {
    let denoised = denoiser.denoise(x, sigma, cond)?;
    let slope: Vec<f64> = x
        .iter()
        .zip(&denoised)
        .map(|(xi, di)| (xi - di) / sigma)
        .collect();
    let dt = sigma_next - sigma;
    let euler: Vec<f64> = x.iter().zip(&slope).map(|(xi, s)| xi + dt * s).collect();
    if sigma_next <= 0.0 {
        return Ok(euler);
    }
    let denoised2 = denoiser.denoise(&euler, sigma_next, cond)?;
    Ok(x.iter()
        .zip(slope.iter().zip(euler.iter().zip(&denoised2)))
        .map(|(xi, (s, (ei, d2)))| {
            let s2 = (ei - d2) / sigma_next;
            xi + dt * 0.5 * (s + s2)
        })
        .collect())
}

/// Second-order deterministic ODE solve along `grid`.
pub fn heun_ode_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &[f64],
    grid: &[f64],
    cond: &Conditioning,
) -> Result<DataPoint> {
    check_grid(grid)?;
    let mut x = start.to_vec();
    for i in 0..grid.len() - 1 {
        x = heun_step(denoiser, &x, grid[i], grid[i + 1], cond)?;
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Euler-Maruyama integration of the backward SDE along `grid`, with Brownian
/// increments supplied per step (`increments[step]` has the state dimension
/// and variance `|dt|` per component). This is the single integration kernel
/// shared by the SDE sampler and the consistency-loss rollout.
pub fn sde_integrate_with_increments<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &[f64],
    grid: &[f64],
    cond: &Conditioning,
    increments: &[Vec<f64>],
) -> Result<DataPoint> {
    check_grid(grid)?;
    if increments.len() != grid.len() - 1 {
        return Err(Error::Shape {
            what: "sde increments",
            expected: grid.len() - 1,
            got: increments.len(),
        });
    }
    let mut x = start.to_vec();
    for i in 0..grid.len() - 1 {
        let sigma = grid[i];
        let dt = grid[i + 1] - sigma;
        let denoised = denoiser.denoise(&x, sigma, cond)?;
        let g2 = 2.0 * sigma;
        let g = g2.sqrt();
        let db = &increments[i];
        if db.len() != x.len() {
            return Err(Error::Shape {
                what: "sde increment dim",
                expected: x.len(),
                got: db.len(),
            });
        }
        for j in 0..x.len() {
            // score via Tweedie, then backward-SDE drift -g^2 * score
            let score = (denoised[j] - x[j]) / (sigma * sigma);
            x[j] += -g2 * score * dt + g * db[j];
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Euler-Maruyama integration drawing its own Brownian increments.
/// `noise_scale` multiplies the stochastic term only; 0 turns the method into
/// a deterministic first-order solve of the drift part (test hook).
pub fn sde_integrate<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &[f64],
    grid: &[f64],
    cond: &Conditioning,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DataPoint> {
    check_grid(grid)?;
    let dim = start.len();
    let increments: Vec<Vec<f64>> = grid
        .windows(2)
        .map(|w| {
            let sd = (w[0] - w[1]).sqrt() * noise_scale;
            (0..dim)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    sde_integrate_with_increments(denoiser, start, grid, cond, &increments)
}

/// Backward-SDE sampler along `grid` with unit noise scale.
pub fn euler_maruyama_sde_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &[f64],
    grid: &[f64],
    cond: &Conditioning,
    rng: &mut ChaCha8Rng,
) -> Result<DataPoint> {
    sde_integrate(denoiser, start, grid, cond, 1.0, rng)
}

/// Churn sub-step: raises the noise level from `sigma` to
/// `sigma_hat = sigma * (1 + gamma)` by injecting fresh noise scaled with
/// `s_noise`. Returns the perturbed state and the new level.
pub fn churned_state(
    x: &[f64],
    sigma: f64,
    gamma: f64,
    s_noise: f64,
    rng: &mut ChaCha8Rng,
) -> (DataPoint, f64) {
    if gamma <= 0.0 {
        return (x.to_vec(), sigma);
    }
    let sigma_hat = sigma * (1.0 + gamma);
    let extra = (sigma_hat * sigma_hat - sigma * sigma).sqrt() * s_noise;
    let x_hat = x
        .iter()
        .map(|xi| xi + extra * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (x_hat, sigma_hat)
}

/// Stochastic second-order sampler: draws the start from
/// `N(center, sigma_0^2 I)`, then alternates churn and Heun steps down the
/// power-law grid. With `s_churn = 0` no randomness is consumed after the
/// start draw and the method reduces to deterministic Heun.
pub fn stochastic_heun_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Conditioning,
    params: &SamplerParams,
    rng: &mut ChaCha8Rng,
) -> Result<DataPoint> {
    params.validate()?;
    let grid = params.time_grid();
    let dim = denoiser.data_dim();
    let center: Vec<f64> = match params.prior_center {
        PriorCenter::Zero => vec![0.0; dim],
        PriorCenter::Mu => {
            if cond.mu.len() != dim {
                return Err(Error::Shape {
                    what: "prior center mu",
                    expected: dim,
                    got: cond.mu.len(),
                });
            }
            cond.mu.clone()
        }
    };
    let sigma0 = grid[0];
    let mut x: Vec<f64> = center
        .iter()
        .map(|c| c + sigma0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for i in 0..grid.len() - 1 {
        let gamma = params.churn_gamma(grid[i]);
        let (x_hat, sigma_hat) = churned_state(&x, grid[i], gamma, params.s_noise, rng);
        x = heun_step(denoiser, &x_hat, sigma_hat, grid[i + 1], cond)?;
        check_finite(&x, i)?;
    }
    Ok(x)
}
