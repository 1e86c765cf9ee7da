//! Training objectives: denoising score matching, the consistency loss with
//! its backward-SDE rollout, prior and duration regression losses, and the
//! optimizer loop for the toy (mixture-target) setting.
//!
//! The consistency loss compares the denoiser's prediction at `(x_t, t)`
//! against (the average of) its own predictions at less-noisy points
//! `(x_{t'}, t')` reached by rolling the backward SDE with the current
//! denoiser. By default the rollout branch is treated as a constant target
//! (`stop_gradient_rollout`); full backpropagation through the rollout is
//! available behind the flag.

use crate::denoiser::{Conditioning, Denoiser, DenoiserGrads, DenoiserNet, InputGrads};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::stream_rng;
use crate::samplers::{sde_integrate, sde_integrate_with_increments};
use crate::schedule::{DataPoint, NoiseSchedule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the consistency term in the final loss.
    pub lambda: f64,
    /// Width of the rollout window: `t' ~ U(t - epsilon, t)`.
    pub epsilon: f64,
    /// Backward-SDE steps from `t` to `t'`.
    pub k_rollout: usize,
    /// Monte-Carlo draws of the inner rollout expectation.
    pub rollout_samples: usize,
    /// Treat the rollout branch as a constant target when differentiating.
    pub stop_gradient_rollout: bool,
    /// Lower bound of the log-uniform noise-level draw (upper bound is the
    /// schedule's sigma_max).
    pub t_sample_min: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            epsilon: 0.05,
            k_rollout: 6,
            rollout_samples: 1,
            stop_gradient_rollout: true,
            t_sample_min: 0.02,
            lr: 1e-3,
            batch_size: 64,
            n_steps: 2000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.k_rollout < 1 {
            return Err(Error::Config("k_rollout must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.rollout_samples < 1 {
            return Err(Error::Config("rollout_samples must be >= 1".into()));
        }
        if !(self.t_sample_min > 0.0) {
            return Err(Error::Config("t_sample_min must be > 0".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.n_steps == 0 {
            return Err(Error::Config("lr, batch_size, n_steps must be positive".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One training example: a clean data vector and its conditioning.
#[derive(Debug, Clone)]
pub struct BatchElem {
    pub x0: DataPoint,
    pub cond: Conditioning,
}

/// Noise-level and perturbation draws for one score-matching element.
#[derive(Debug, Clone)]
pub struct DsmDraw {
    pub t: f64,
    pub z: Vec<f64>,
}

/// Log-uniform draw over `[t_sample_min, sigma_max]`.
pub fn draw_t_log_uniform(cfg: &TrainConfig, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> f64 {
    let lo = cfg.t_sample_min.ln();
    let hi = schedule.sigma_max.ln();
    (lo + rng.gen::<f64>() * (hi - lo)).exp()
}

pub fn sample_dsm_draws(
    n: usize,
    dim: usize,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<DsmDraw> {
    (0..n)
        .map(|_| DsmDraw {
            t: draw_t_log_uniform(cfg, schedule, rng),
            z: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_loss_finite(loss: f64, what: &str, t: f64, x_t: &[f64]) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "{what} (t={t}, |x_t|={:.3e})",
            norm_sq(x_t).sqrt()
        )));
    }
    Ok(loss)
}

/// Score-matching loss `mean_b ||denoise(x0 + t z, t) - x0||^2` for any
/// denoiser, with the noise draws supplied explicitly.
pub fn loss_dsm_value<D: Denoiser + ?Sized>(
    denoiser: &D,
    batch: &[BatchElem],
    draws: &[DsmDraw],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::Shape {
            what: "dsm batch/draws",
            expected: batch.len().max(1),
            got: draws.len(),
        });
    }
    let mut total = 0.0;
    for (elem, draw) in batch.iter().zip(draws) {
        let x_t = schedule.perturb(&elem.x0, draw.t, &draw.z)?;
        let out = denoiser.denoise(&x_t, draw.t, &elem.cond)?;
        let sq: f64 = out
            .iter()
            .zip(&elem.x0)
            .map(|(o, x)| (o - x) * (o - x))
            .sum();
        total += check_loss_finite(sq, "dsm loss", draw.t, &x_t)?;
    }
    Ok(total / batch.len() as f64)
}

/// Score-matching loss with gradients accumulated into `grads`, scaled by
/// `weight` (the objective may weight this term). When `cond_grads` is
/// requested, per-element gradients with respect to the conditioning inputs
/// are returned as well (used by the acoustic pipeline to train the prior
/// encoder and speaker table through the decoder). The returned loss value is
/// unweighted.
pub fn loss_dsm_grad(
    net: &DenoiserNet,
    batch: &[BatchElem],
    draws: &[DsmDraw],
    schedule: &NoiseSchedule,
    weight: f64,
    grads: &mut DenoiserGrads,
    want_cond_grads: bool,
) -> Result<(f64, Option<Vec<InputGrads>>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::Shape {
            what: "dsm batch/draws",
            expected: batch.len().max(1),
            got: draws.len(),
        });
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut cond_grads = want_cond_grads.then(Vec::new);
    for (elem, draw) in batch.iter().zip(draws) {
        let x_t = schedule.perturb(&elem.x0, draw.t, &draw.z)?;
        let cache = net.forward_cached(&x_t, draw.t, &elem.cond)?;
        let resid: Vec<f64> = cache
            .output
            .iter()
            .zip(&elem.x0)
            .map(|(o, x)| o - x)
            .collect();
        total += check_loss_finite(norm_sq(&resid), "dsm loss", draw.t, &x_t)?;
        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r * inv_b * weight).collect();
        let ig = net.backward(&cache, &upstream, grads, want_cond_grads);
        if let Some(sink) = cond_grads.as_mut() {
            sink.push(ig.expect("input grads requested"));
        }
    }
    Ok((total * inv_b, cond_grads))
}

/// Runs the backward SDE from `(x_t, t)` down to `t'` on a uniform grid of
/// `k` steps, with the score supplied by the denoiser through Tweedie's
/// formula. Shares its integration kernel with the SDE sampler.
pub fn rollout_backward<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &[f64],
    t: f64,
    t_prime: f64,
    k: usize,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<DataPoint> {
    if t_prime >= t {
        return Err(Error::Domain {
            what: "rollout t_prime must be below t",
            value: t_prime,
        });
    }
    if t_prime < schedule.sigma_min {
        return Err(Error::Domain {
            what: "rollout t_prime below sigma_min",
            value: t_prime,
        });
    }
    if k < 1 {
        return Err(Error::Config("rollout needs k >= 1".into()));
    }
    let grid = rollout_grid(t, t_prime, k);
    sde_integrate(denoiser, x_t, &grid, cond, 1.0, rng)
}

fn rollout_grid(t: f64, t_prime: f64, k: usize) -> Vec<f64> {
    let dt = (t_prime - t) / k as f64;
    let mut grid: Vec<f64> = (0..k).map(|j| t + j as f64 * dt).collect();
    grid.push(t_prime);
    grid
}

/// Randomness consumed by the consistency loss for one batch element.
#[derive(Debug, Clone)]
pub struct CdmElemDraw {
    pub t: f64,
    pub z: Vec<f64>,
    pub t_prime: f64,
    /// Standard-normal draws per inner rollout, step-major `[k * dim]`.
    pub rollout_normals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CdmDraws(pub Vec<CdmElemDraw>);

/// Draws `(t, z, t', rollout noise)` for `n` elements. The `t'` window is
/// `U(max(t - epsilon, sigma_min), t)`; with `epsilon = 0` it collapses onto
/// `t` (used as a test hook; the training entry point validates
/// `epsilon > 0`).
pub fn sample_cdm_draws(
    n: usize,
    dim: usize,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> CdmDraws {
    let mut elems = Vec::with_capacity(n);
    for _ in 0..n {
        let t = draw_t_log_uniform(cfg, schedule, rng);
        let z = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let lo = (t - cfg.epsilon).max(schedule.sigma_min);
        let t_prime = if lo >= t { t } else { lo + rng.gen::<f64>() * (t - lo) };
        let rollout_normals = (0..cfg.rollout_samples)
            .map(|_| {
                (0..cfg.k_rollout * dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        elems.push(CdmElemDraw {
            t,
            z,
            t_prime,
            rollout_normals,
        });
    }
    CdmDraws(elems)
}

fn scaled_increments(normals: &[f64], k: usize, dim: usize, dt_abs: f64) -> Vec<Vec<f64>> {
    let sd = dt_abs.sqrt();
    (0..k)
        .map(|j| normals[j * dim..(j + 1) * dim].iter().map(|z| sd * z).collect())
        .collect()
}

/// Rollout endpoints `x_{t'}` for one element, one per inner Monte-Carlo
/// sample. Degenerate windows (`t' = t`) return copies of `x_t`.
fn rollout_endpoints<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &[f64],
    draw: &CdmElemDraw,
    cond: &Conditioning,
    k: usize,
) -> Result<Vec<DataPoint>> {
    if draw.t_prime >= draw.t {
        return Ok(vec![x_t.to_vec(); draw.rollout_normals.len()]);
    }
    let grid = rollout_grid(draw.t, draw.t_prime, k);
    let dim = x_t.len();
    let dt_abs = (draw.t - draw.t_prime) / k as f64;
    draw.rollout_normals
        .iter()
        .map(|normals| {
            let incs = scaled_increments(normals, k, dim, dt_abs);
            sde_integrate_with_increments(denoiser, x_t, &grid, cond, &incs)
        })
        .collect()
}

/// Consistency-loss targets (average of rollout predictions) per element,
/// evaluated with the given denoiser and frozen draws. Exposed so tests can
/// hold the target constant while differentiating the prediction branch.
pub fn cdm_targets_from_draws<D: Denoiser + ?Sized>(
    denoiser: &D,
    batch: &[BatchElem],
    draws: &CdmDraws,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<DataPoint>> {
    let mut targets = Vec::with_capacity(batch.len());
    for (elem, draw) in batch.iter().zip(&draws.0) {
        let x_t = schedule.perturb(&elem.x0, draw.t, &draw.z)?;
        let ends = rollout_endpoints(denoiser, &x_t, draw, &elem.cond, cfg.k_rollout)?;
        let mut target = vec![0.0; elem.x0.len()];
        for end in &ends {
            let pred = denoiser.denoise(end, draw.t_prime, &elem.cond)?;
            for (tv, p) in target.iter_mut().zip(&pred) {
                *tv += p;
            }
        }
        let inv_m = 1.0 / ends.len() as f64;
        target.iter_mut().for_each(|v| *v *= inv_m);
        targets.push(target);
    }
    Ok(targets)
}

/// Consistency loss `mean_b 1/2 ||target_b - denoise(x_t, t)||^2` for any
/// denoiser, with frozen draws.
pub fn loss_cdm_from_draws<D: Denoiser + ?Sized>(
    denoiser: &D,
    batch: &[BatchElem],
    draws: &CdmDraws,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != draws.0.len() {
        return Err(Error::Shape {
            what: "cdm batch/draws",
            expected: batch.len().max(1),
            got: draws.0.len(),
        });
    }
    let targets = cdm_targets_from_draws(denoiser, batch, draws, cfg, schedule)?;
    let mut total = 0.0;
    for ((elem, draw), target) in batch.iter().zip(&draws.0).zip(&targets) {
        let x_t = schedule.perturb(&elem.x0, draw.t, &draw.z)?;
        let base = denoiser.denoise(&x_t, draw.t, &elem.cond)?;
        let sq: f64 = target
            .iter()
            .zip(&base)
            .map(|(tv, b)| (tv - b) * (tv - b))
            .sum();
        total += check_loss_finite(0.5 * sq, "cdm loss", draw.t, &x_t)?;
    }
    Ok(total / batch.len() as f64)
}

/// Consistency loss sampling its own draws.
pub fn loss_cdm_value<D: Denoiser + ?Sized>(
    denoiser: &D,
    batch: &[BatchElem],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let dim = batch.first().map(|e| e.x0.len()).unwrap_or(0);
    let draws = sample_cdm_draws(batch.len(), dim, cfg, schedule, rng);
    loss_cdm_from_draws(denoiser, batch, &draws, cfg, schedule)
}

/// Consistency loss with gradients, using frozen draws. Gradients are scaled
/// by `weight` (the final objective applies `lambda` to this term); the
/// returned loss value is unweighted.
///
/// With `stop_gradient_rollout` the target is a constant and only the
/// `denoise(x_t, t)` branch is differentiated; otherwise the gradient also
/// flows through every rollout step and every rollout-side evaluation.
pub fn loss_cdm_grad(
    net: &DenoiserNet,
    batch: &[BatchElem],
    draws: &CdmDraws,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    weight: f64,
    grads: &mut DenoiserGrads,
    want_cond_grads: bool,
) -> Result<(f64, Option<Vec<InputGrads>>)> {
    if batch.is_empty() || batch.len() != draws.0.len() {
        return Err(Error::Shape {
            what: "cdm batch/draws",
            expected: batch.len().max(1),
            got: draws.0.len(),
        });
    }
    let inv_b = 1.0 / batch.len() as f64;
    let dim = batch[0].x0.len();
    let mut total = 0.0;
    let mut cond_grads = want_cond_grads.then(Vec::new);

    for (elem, draw) in batch.iter().zip(&draws.0) {
        let x_t = schedule.perturb(&elem.x0, draw.t, &draw.z)?;
        let k = cfg.k_rollout;
        let m_count = draw.rollout_normals.len();
        let inv_m = 1.0 / m_count as f64;
        let mut elem_cond_grad = want_cond_grads.then(|| InputGrads {
            x: vec![0.0; dim],
            mu: vec![0.0; elem.cond.mu.len()],
            speaker: vec![0.0; elem.cond.speaker.len()],
        });

        // Forward pass of the prediction branch.
        let base_cache = net.forward_cached(&x_t, draw.t, &elem.cond)?;

        let degenerate = draw.t_prime >= draw.t;
        let grid = if degenerate {
            Vec::new()
        } else {
            rollout_grid(draw.t, draw.t_prime, k)
        };
        let dt_abs = if degenerate { 0.0 } else { (draw.t - draw.t_prime) / k as f64 };

        // Forward rollouts, keeping per-step states and caches when the
        // gradient must flow through them.
        struct Rollout {
            states: Vec<DataPoint>,
            caches: Vec<crate::denoiser::ForwardCache>,
            end_cache: crate::denoiser::ForwardCache,
        }
        let mut rollouts = Vec::with_capacity(m_count);
        let mut target = vec![0.0; dim];
        for normals in &draw.rollout_normals {
            let mut states = Vec::with_capacity(k + 1);
            let mut caches = Vec::new();
            let mut x = x_t.clone();
            if !degenerate {
                let incs = scaled_increments(normals, k, dim, dt_abs);
                for j in 0..k {
                    let sigma = grid[j];
                    let dt = grid[j + 1] - sigma;
                    let cache = net.forward_cached(&x, sigma, &elem.cond)?;
                    states.push(x.clone());
                    let mut next = vec![0.0; dim];
                    let g2 = 2.0 * sigma;
                    let g = g2.sqrt();
                    for i in 0..dim {
                        let score = (cache.output[i] - x[i]) / (sigma * sigma);
                        next[i] = x[i] - g2 * score * dt + g * incs[j][i];
                    }
                    if !cfg.stop_gradient_rollout {
                        caches.push(cache);
                    }
                    x = next;
                }
            }
            let end_cache = net.forward_cached(&x, draw.t_prime, &elem.cond)?;
            for (tv, p) in target.iter_mut().zip(&end_cache.output) {
                *tv += inv_m * p;
            }
            rollouts.push(Rollout {
                states,
                caches,
                end_cache,
            });
        }

        let resid: Vec<f64> = target
            .iter()
            .zip(&base_cache.output)
            .map(|(t, b)| t - b)
            .collect();
        total += check_loss_finite(0.5 * norm_sq(&resid), "cdm loss", draw.t, &x_t)?;

        // Prediction branch: d loss / d base = -resid / B.
        let upstream_base: Vec<f64> = resid.iter().map(|r| -r * inv_b * weight).collect();
        let ig = net.backward(&base_cache, &upstream_base, grads, want_cond_grads);
        if let (Some(acc), Some(ig)) = (elem_cond_grad.as_mut(), ig) {
            accumulate_input_grads(acc, &ig);
        }

        if !cfg.stop_gradient_rollout {
            // Target branch: d loss / d target_m = resid / (B * M), then back
            // through the endpoint evaluation and the rollout chain.
            let upstream_end: Vec<f64> = resid
                .iter()
                .map(|r| r * inv_b * inv_m * weight)
                .collect();
            for rollout in &rollouts {
                let ig = net.backward(&rollout.end_cache, &upstream_end, grads, true);
                let ig = ig.expect("input grads requested");
                if let Some(acc) = elem_cond_grad.as_mut() {
                    acc_mu_speaker(acc, &ig);
                }
                let mut v = ig.x;
                for j in (0..rollout.caches.len()).rev() {
                    let sigma = grid[j];
                    let dt = grid[j + 1] - sigma;
                    // x_{j+1} = (1 - a) x_j + a * denoise(x_j) + noise,
                    // a = -2 dt / sigma
                    let a = -2.0 * dt / sigma;
                    let upstream_h: Vec<f64> = v.iter().map(|vi| a * vi).collect();
                    let ig = net
                        .backward(&rollout.caches[j], &upstream_h, grads, true)
                        .expect("input grads requested");
                    if let Some(acc) = elem_cond_grad.as_mut() {
                        acc_mu_speaker(acc, &ig);
                    }
                    for i in 0..dim {
                        v[i] = (1.0 - a) * v[i] + ig.x[i];
                    }
                    let _ = &rollout.states[j];
                }
                if let Some(acc) = elem_cond_grad.as_mut() {
                    for (xa, vi) in acc.x.iter_mut().zip(&v) {
                        *xa += vi;
                    }
                }
            }
        }

        if let (Some(sink), Some(acc)) = (cond_grads.as_mut(), elem_cond_grad) {
            sink.push(acc);
        }
    }
    Ok((total * inv_b, cond_grads))
}

fn accumulate_input_grads(acc: &mut InputGrads, ig: &InputGrads) {
    for (a, g) in acc.x.iter_mut().zip(&ig.x) {
        *a += g;
    }
    acc_mu_speaker(acc, ig);
}

fn acc_mu_speaker(acc: &mut InputGrads, ig: &InputGrads) {
    for (a, g) in acc.mu.iter_mut().zip(&ig.mu) {
        *a += g;
    }
    for (a, g) in acc.speaker.iter_mut().zip(&ig.speaker) {
        *a += g;
    }
}

/// Mean squared error between frame-level prior means and target frames.
pub fn loss_prior(mu_frames: &[Vec<f64>], x0_frames: &[Vec<f64>]) -> Result<f64> {
    if mu_frames.len() != x0_frames.len() || mu_frames.is_empty() {
        return Err(Error::Shape {
            what: "prior loss frames",
            expected: x0_frames.len().max(1),
            got: mu_frames.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (mu, x0) in mu_frames.iter().zip(x0_frames) {
        if mu.len() != x0.len() {
            return Err(Error::Shape {
                what: "prior loss channels",
                expected: x0.len(),
                got: mu.len(),
            });
        }
        for (m, x) in mu.iter().zip(x0) {
            total += (m - x) * (m - x);
        }
        count += mu.len();
    }
    Ok(total / count as f64)
}

/// Log-domain duration encoding `log(d + 1)`.
pub fn encode_duration(frames: u32) -> f64 {
    (frames as f64 + 1.0).ln()
}

/// Inverse of [`encode_duration`]: `round(exp(y) - 1)`, clamped to >= 1.
pub fn decode_duration(y: f64) -> u32 {
    let d = (y.exp() - 1.0).round();
    if d < 1.0 {
        1
    } else {
        d as u32
    }
}

/// Mean squared error between predicted log-durations and encoded targets.
pub fn loss_duration(pred_log: &[f64], true_durations: &[u32]) -> Result<f64> {
    if pred_log.len() != true_durations.len() || pred_log.is_empty() {
        return Err(Error::Shape {
            what: "duration loss tokens",
            expected: true_durations.len().max(1),
            got: pred_log.len(),
        });
    }
    let mut total = 0.0;
    for (p, &d) in pred_log.iter().zip(true_durations) {
        if d == 0 {
            return Err(Error::Data("duration must be >= 1 frame".into()));
        }
        let target = encode_duration(d);
        total += (p - target) * (p - target);
    }
    Ok(total / pred_log.len() as f64)
}

/// The four loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub duration: f64,
    pub prior: f64,
    pub dsm: f64,
    pub cdm: f64,
}

/// Combined objective: `duration + prior + dsm + lambda * cdm`.
pub fn total_loss(parts: &LossParts, lambda: f64) -> f64 {
    parts.duration + parts.prior + parts.dsm + lambda * parts.cdm
}

/// One row of the emitted loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub l_duration: f64,
    pub l_prior: f64,
    pub l_dsm: f64,
    pub l_cdm: f64,
    pub l_final: f64,
    pub wall_ms: f64,
}

pub const HISTORY_CSV_HEADER: &str = "step,L_duration,L_prior,L_DSM,L_CDM,L_final,wall_ms";

/// Writes the loss history as CSV (shortest round-trip decimal per value).
pub fn write_history_csv(rows: &[HistoryRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.l_duration, r.l_prior, r.l_dsm, r.l_cdm, r.l_final, r.wall_ms
        )?;
    }
    Ok(())
}

/// Denoiser training state for the toy (mixture-target) setting.
#[derive(Debug, Clone)]
pub struct ToyTrainState {
    pub net: DenoiserNet,
    pub adam: Adam,
    pub step: usize,
}

/// Result of a toy training run. `diverged_at` is set when a non-finite loss
/// aborted the run; the state then holds the last finite parameters.
#[derive(Debug)]
pub struct ToyRun {
    pub state: ToyTrainState,
    pub history: Vec<HistoryRow>,
    pub diverged_at: Option<usize>,
}

/// Trains a fresh zero-headed denoiser on mixture samples with the combined
/// `dsm + lambda * cdm` objective. Deterministic given `cfg.seed`.
pub fn train_toy(
    gmm: &crate::gmm::GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    net_cfg: crate::denoiser::DenoiserConfig,
) -> Result<ToyRun> {
    cfg.validate()?;
    schedule.validate()?;
    let mut init_rng = stream_rng(cfg.seed, u64::MAX);
    let net = DenoiserNet::init(net_cfg, &mut init_rng)?;
    let adam = Adam::new(net.param_count());
    let mut state = ToyTrainState { net, adam, step: 0 };
    let (history, diverged_at) = train_toy_steps(&mut state, gmm, schedule, cfg)?;
    Ok(ToyRun {
        state,
        history,
        diverged_at,
    })
}

/// Continues training from `state.step` to `cfg.n_steps`. Step `i` consumes
/// the stream `(cfg.seed, i)`, so a resumed run consumes exactly the same
/// randomness as an unbroken one.
pub fn train_toy_steps(
    state: &mut ToyTrainState,
    gmm: &crate::gmm::GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<HistoryRow>, Option<usize>)> {
    cfg.validate()?;
    let dim = gmm.dim();
    if dim != state.net.config.data_dim {
        return Err(Error::Shape {
            what: "toy training data dim",
            expected: state.net.config.data_dim,
            got: dim,
        });
    }
    let spk_dim = state.net.config.speaker_dim;
    let mut history = Vec::new();
    let mut grads = DenoiserGrads::zeros(&state.net);
    let mut flat_params = Vec::with_capacity(state.net.param_count());
    let mut flat_grads = Vec::with_capacity(state.net.param_count());

    while state.step < cfg.n_steps {
        let step = state.step;
        let started = Instant::now();
        let mut rng = stream_rng(cfg.seed, step as u64);
        let batch: Vec<BatchElem> = gmm
            .sample(cfg.batch_size, &mut rng)
            .into_iter()
            .map(|x0| BatchElem {
                x0,
                cond: Conditioning::none(dim, spk_dim),
            })
            .collect();
        let dsm_draws = sample_dsm_draws(cfg.batch_size, dim, cfg, schedule, &mut rng);
        grads.reset();
        let dsm =
            match loss_dsm_grad(&state.net, &batch, &dsm_draws, schedule, 1.0, &mut grads, false) {
                Ok((v, _)) => v,
                Err(Error::NonFinite(_)) => return Ok((history, Some(step))),
                Err(e) => return Err(e),
            };
        let cdm = if cfg.lambda > 0.0 {
            let draws = sample_cdm_draws(cfg.batch_size, dim, cfg, schedule, &mut rng);
            match loss_cdm_grad(
                &state.net,
                &batch,
                &draws,
                cfg,
                schedule,
                cfg.lambda,
                &mut grads,
                false,
            ) {
                Ok((v, _)) => v,
                Err(Error::NonFinite(_)) => return Ok((history, Some(step))),
                Err(e) => return Err(e),
            }
        } else {
            0.0
        };
        let parts = LossParts {
            duration: 0.0,
            prior: 0.0,
            dsm,
            cdm,
        };
        let l_final = total_loss(&parts, cfg.lambda);
        if !l_final.is_finite() {
            return Ok((history, Some(step)));
        }

        flat_params.clear();
        flat_grads.clear();
        state.net.flatten_into(&mut flat_params);
        grads.flatten_into(&mut flat_grads);
        state.adam.update(
            &mut flat_params,
            &flat_grads,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )?;
        state.net.unflatten_from(&flat_params)?;
        state.step += 1;

        history.push(HistoryRow {
            step,
            l_duration: 0.0,
            l_prior: 0.0,
            l_dsm: dsm,
            l_cdm: cdm,
            l_final,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((history, None))
}
