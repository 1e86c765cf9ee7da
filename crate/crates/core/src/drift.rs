//! Measuring sampling drift and consistency violation.
//!
//! The harness quantifies two things on mixture targets where ground truth is
//! available in closed form: how strongly a denoiser violates the consistency
//! property out-of-training (its prediction at `(x_t, t)` versus its own
//! averaged prediction after rolling its backward SDE to `t'`), and how far
//! few-step samples drift from the target distribution (moment errors, energy
//! distance, oracle log-likelihood). The paired experiment trains matched
//! models with and without the consistency term and reports per-seed metrics
//! and medians.

use crate::denoiser::{Conditioning, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::losses::{rollout_backward, train_toy, TrainConfig};
use crate::rng::stream_rng;
use crate::samplers::{sde_integrate_with_increments, stochastic_heun_sample, SamplerParams};
use crate::schedule::{DataPoint, NoiseSchedule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Settings of the out-of-training consistency probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epsilon: f64,
    pub k: usize,
    pub m: usize,
    pub n_probes: usize,
    pub t_grid: Vec<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            k: 6,
            m: 4,
            n_probes: 256,
            t_grid: vec![0.25, 0.75, 2.0, 6.0, 12.0],
        }
    }
}

/// Distribution metrics of a sample set against a mixture target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    /// Euclidean norm of the mean difference.
    pub mean_error: f64,
    /// Frobenius norm of the covariance difference.
    pub cov_error: f64,
    /// Energy distance against the oracle reference draws.
    pub energy_distance: f64,
    /// Mean log density of the samples under the clean target.
    pub mean_log_density: f64,
    pub n_samples: usize,
    pub n_oracle: usize,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance between two sample sets (V-statistic form):
/// `2 E||x - y|| - E||x - x'|| - E||y - y'||`. Nonnegative, symmetric, and
/// exactly zero for identical sets.
pub fn energy_distance(a: &[DataPoint], b: &[DataPoint]) -> f64 {
    let mean_pair = |xs: &[DataPoint], ys: &[DataPoint]| -> f64 {
        let mut total = 0.0;
        for x in xs {
            for y in ys {
                total += euclid(x, y);
            }
        }
        total / (xs.len() * ys.len()) as f64
    };
    2.0 * mean_pair(a, b) - mean_pair(a, a) - mean_pair(b, b)
}

fn sample_mean(samples: &[DataPoint]) -> Vec<f64> {
    let d = samples[0].len();
    let mut m = vec![0.0; d];
    for s in samples {
        for (mi, v) in m.iter_mut().zip(s) {
            *mi += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= samples.len() as f64);
    m
}

fn sample_covariance(samples: &[DataPoint], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= samples.len() as f64);
    cov
}

/// Moment errors, energy distance, and mean oracle log density of `samples`
/// against the target mixture, using the provided oracle reference draws.
/// Deterministic given both sample sets.
pub fn distribution_distance(
    samples: &[DataPoint],
    gmm: &GaussianMixture,
    oracle: &[DataPoint],
) -> Result<DriftMetrics> {
    if samples.is_empty() || oracle.is_empty() {
        return Err(Error::Data("distribution_distance needs samples".into()));
    }
    let mean = sample_mean(samples);
    let mean_error = euclid(&mean, &gmm.mean());
    let cov = sample_covariance(samples, &mean);
    let cov_error = cov
        .iter()
        .zip(gmm.covariance())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut mean_log_density = 0.0;
    for s in samples {
        mean_log_density += gmm.log_density(s)?;
    }
    mean_log_density /= samples.len() as f64;
    Ok(DriftMetrics {
        mean_error,
        cov_error,
        energy_distance: energy_distance(samples, oracle),
        mean_log_density,
        n_samples: samples.len(),
        n_oracle: oracle.len(),
    })
}

/// Per-probe consistency violations at one noise level: draw `x_t` from the
/// true marginal, roll the denoiser's backward SDE to `t' ~ U(t - eps, t)`
/// (`m` rollouts), and measure
/// `1/2 || mean_m denoise(x_{t'}, t') - denoise(x_t, t) ||^2`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_violation_values<D: Denoiser + ?Sized>(
    denoiser: &D,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: f64,
    probe: &ProbeConfig,
    cond: &Conditioning,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if probe.n_probes == 0 {
        return Err(Error::Config("probe count must be positive".into()));
    }
    let marginal = gmm.marginal_at(t)?;
    let mut values = Vec::with_capacity(probe.n_probes);
    for _ in 0..probe.n_probes {
        let x_t = marginal.sample_one(rng);
        let lo = (t - probe.epsilon).max(schedule.sigma_min);
        let t_prime = lo + rng.gen::<f64>() * (t - lo);
        let mut target = vec![0.0; gmm.dim()];
        for _ in 0..probe.m {
            let end = rollout_backward(denoiser, &x_t, t, t_prime, probe.k, cond, schedule, rng)?;
            let pred = denoiser.denoise(&end, t_prime, cond)?;
            for (tv, p) in target.iter_mut().zip(&pred) {
                *tv += p / probe.m as f64;
            }
        }
        let base = denoiser.denoise(&x_t, t, cond)?;
        let v = 0.5
            * target
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        values.push(v);
    }
    Ok(values)
}

/// Mean consistency violation per noise level of `probe.t_grid`.
pub fn consistency_violation<D: Denoiser + ?Sized>(
    denoiser: &D,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    probe: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, f64)>> {
    let cond = denoiser.no_cond();
    probe
        .t_grid
        .iter()
        .map(|&t| {
            let values =
                consistency_violation_values(denoiser, gmm, schedule, t, probe, &cond, rng)?;
            Ok((t, values.iter().sum::<f64>() / values.len() as f64))
        })
        .collect()
}

/// One point of the rollout-resolution sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepPoint {
    pub k: usize,
    pub mean: f64,
    pub std_err: f64,
}

/// Consistency violation of a denoiser as a function of rollout resolution,
/// with common random numbers across resolutions: every `k` must divide the
/// largest one, and coarse Brownian increments are sums of the fine ones, so
/// the comparison across `k` is tightly paired.
#[allow(clippy::too_many_arguments)]
pub fn consistency_k_sweep<D: Denoiser + ?Sized>(
    denoiser: &D,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    ks: &[usize],
    epsilon: f64,
    m: usize,
    n_probes: usize,
    t_levels: &[f64],
    seed: u64,
) -> Result<Vec<KSweepPoint>> {
    if ks.is_empty() || t_levels.is_empty() || n_probes == 0 || m == 0 {
        return Err(Error::Config("k sweep needs ks, t levels, probes".into()));
    }
    let k_max = *ks.iter().max().expect("nonempty");
    for &k in ks {
        if k == 0 || k_max % k != 0 {
            return Err(Error::Config(format!(
                "every k must divide the largest one; got {k} vs {k_max}"
            )));
        }
    }
    let dim = gmm.dim();
    let cond = denoiser.no_cond();
    let mut rng = stream_rng(seed, 0);
    let mut per_k: Vec<Vec<f64>> = vec![Vec::with_capacity(n_probes); ks.len()];

    for probe_idx in 0..n_probes {
        let t = t_levels[probe_idx % t_levels.len()];
        let marginal = gmm.marginal_at(t)?;
        let x_t = marginal.sample_one(&mut rng);
        let lo = (t - epsilon).max(schedule.sigma_min);
        let t_prime = lo + rng.gen::<f64>() * (t - lo);
        let dt_fine = (t - t_prime) / k_max as f64;
        // fine-grid Brownian increments, shared by every resolution
        let fine: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..k_max * dim)
                    .map(|_| dt_fine.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        let base = denoiser.denoise(&x_t, t, &cond)?;

        for (ki, &k) in ks.iter().enumerate() {
            let factor = k_max / k;
            let dt = (t_prime - t) / k as f64;
            let grid: Vec<f64> = (0..k)
                .map(|j| t + j as f64 * dt)
                .chain(std::iter::once(t_prime))
                .collect();
            let mut target = vec![0.0; dim];
            for fine_m in &fine {
                // coarse increment = sum of the fine increments it spans
                let incs: Vec<Vec<f64>> = (0..k)
                    .map(|j| {
                        let mut db = vec![0.0; dim];
                        for sub in 0..factor {
                            let row = j * factor + sub;
                            for (dbi, z) in db.iter_mut().zip(&fine_m[row * dim..(row + 1) * dim])
                            {
                                *dbi += z;
                            }
                        }
                        db
                    })
                    .collect();
                let end = sde_integrate_with_increments(denoiser, &x_t, &grid, &cond, &incs)?;
                let pred = denoiser.denoise(&end, t_prime, &cond)?;
                for (tv, p) in target.iter_mut().zip(&pred) {
                    *tv += p / m as f64;
                }
            }
            let v = 0.5
                * target
                    .iter()
                    .zip(&base)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            per_k[ki].push(v);
        }
    }

    Ok(ks
        .iter()
        .zip(&per_k)
        .map(|(&k, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            KSweepPoint {
                k,
                mean,
                std_err: (var / n).sqrt(),
            }
        })
        .collect())
}

/// Everything the drift evaluation of one model produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub schema_version: u32,
    pub seed: u64,
    pub sampler: SamplerParams,
    pub probe: ProbeConfig,
    /// `(t, mean violation)` per noise level.
    pub consistency: Vec<(f64, f64)>,
    pub metrics: DriftMetrics,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Samples the model with the given sampler, measures distribution distances
/// and consistency violations against the target mixture.
pub fn drift_report<D: Denoiser + ?Sized>(
    denoiser: &D,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    sampler: &SamplerParams,
    probe: &ProbeConfig,
    n_samples: usize,
    n_oracle: usize,
    seed: u64,
) -> Result<DriftReport> {
    if n_samples < 1000 {
        return Err(Error::Config(
            "drift metrics need at least 1000 samples".into(),
        ));
    }
    let cond = denoiser.no_cond();
    let mut sample_rng = stream_rng(seed, 1);
    let samples: Vec<DataPoint> = (0..n_samples)
        .map(|_| stochastic_heun_sample(denoiser, &cond, sampler, &mut sample_rng))
        .collect::<Result<_>>()?;
    let mut oracle_rng = stream_rng(seed, 2);
    let oracle = gmm.sample(n_oracle, &mut oracle_rng);
    let metrics = distribution_distance(&samples, gmm, &oracle)?;
    let mut probe_rng = stream_rng(seed, 3);
    let consistency = consistency_violation(denoiser, gmm, schedule, probe, &mut probe_rng)?;
    Ok(DriftReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        sampler: *sampler,
        probe: probe.clone(),
        consistency,
        metrics,
    })
}

impl DriftReport {
    /// Flattened CSV: one row per probed noise level plus one row of the
    /// distribution metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("record,t,value\n");
        for (t, v) in &self.consistency {
            out.push_str(&format!("consistency,{t},{v}\n"));
        }
        out.push_str(&format!("mean_error,,{}\n", self.metrics.mean_error));
        out.push_str(&format!("cov_error,,{}\n", self.metrics.cov_error));
        out.push_str(&format!(
            "energy_distance,,{}\n",
            self.metrics.energy_distance
        ));
        out.push_str(&format!(
            "mean_log_density,,{}\n",
            self.metrics.mean_log_density
        ));
        out
    }
}

/// Configuration of the paired comparison experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub n_seeds: u64,
    pub n_eval_samples: usize,
    pub n_oracle_samples: usize,
    pub probe: ProbeConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            n_eval_samples: 4000,
            n_oracle_samples: 10_000,
            probe: ProbeConfig::default(),
        }
    }
}

/// One trained arm of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareArm {
    pub seed: u64,
    pub lambda: f64,
    pub final_dsm: f64,
    /// Mean violation across the probe grid.
    pub consistency_mean: f64,
    pub consistency: Vec<(f64, f64)>,
    pub metrics: DriftMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub lambda_cdm: f64,
    pub sampler: SamplerParams,
    pub arms: Vec<CompareArm>,
    pub median_violation_cdm: f64,
    pub median_violation_dsm: f64,
    pub median_energy_cdm: f64,
    pub median_energy_dsm: f64,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains matched models (`lambda = base.lambda` vs `lambda = 0`) for each
/// seed under equal optimizer budgets, samples both with the given few-step
/// sampler, and reports per-seed metrics plus medians.
pub fn compare_cdm_vs_dsm(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    base: &TrainConfig,
    net_cfg: DenoiserConfig,
    sampler: &SamplerParams,
    cfg: &CompareConfig,
) -> Result<CompareReport> {
    if cfg.n_seeds == 0 {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    if !(base.lambda > 0.0) {
        return Err(Error::Config(
            "comparison base config must have lambda > 0".into(),
        ));
    }
    let mut arms = Vec::new();
    for seed in 0..cfg.n_seeds {
        for lambda in [base.lambda, 0.0] {
            let train_cfg = TrainConfig {
                lambda,
                seed,
                ..*base
            };
            let run = train_toy(gmm, schedule, &train_cfg, net_cfg)?;
            if let Some(step) = run.diverged_at {
                return Err(Error::Diverged {
                    step,
                    detail: format!("comparison arm seed={seed} lambda={lambda}"),
                });
            }
            let arm_tag = if lambda > 0.0 { 10 } else { 20 };
            let net = &run.state.net;
            let cond = net.no_cond();

            let mut sample_rng = stream_rng(seed, 100 + arm_tag);
            let samples: Vec<DataPoint> = (0..cfg.n_eval_samples)
                .map(|_| stochastic_heun_sample(net, &cond, sampler, &mut sample_rng))
                .collect::<Result<_>>()?;
            // one shared oracle reference per seed keeps the arms paired
            let oracle = gmm.sample(cfg.n_oracle_samples, &mut stream_rng(seed, 7));
            let metrics = distribution_distance(&samples, gmm, &oracle)?;

            let mut probe_rng = stream_rng(seed, 200 + arm_tag);
            let consistency = {
                let mut out = Vec::new();
                for &t in &cfg.probe.t_grid {
                    let values = consistency_violation_values(
                        net, gmm, schedule, t, &cfg.probe, &cond, &mut probe_rng,
                    )?;
                    out.push((t, values.iter().sum::<f64>() / values.len() as f64));
                }
                out
            };
            let consistency_mean =
                consistency.iter().map(|(_, v)| v).sum::<f64>() / consistency.len() as f64;
            arms.push(CompareArm {
                seed,
                lambda,
                final_dsm: run.history.last().map(|r| r.l_dsm).unwrap_or(f64::NAN),
                consistency_mean,
                consistency,
                metrics,
            });
        }
    }

    let collect = |lambda_nonzero: bool, f: &dyn Fn(&CompareArm) -> f64| -> f64 {
        let mut vals: Vec<f64> = arms
            .iter()
            .filter(|a| (a.lambda > 0.0) == lambda_nonzero)
            .map(f)
            .collect();
        median(&mut vals)
    };
    Ok(CompareReport {
        schema_version: REPORT_SCHEMA_VERSION,
        lambda_cdm: base.lambda,
        sampler: *sampler,
        median_violation_cdm: collect(true, &|a| a.consistency_mean),
        median_violation_dsm: collect(false, &|a| a.consistency_mean),
        median_energy_cdm: collect(true, &|a| a.metrics.energy_distance),
        median_energy_dsm: collect(false, &|a| a.metrics.energy_distance),
        arms,
    })
}

impl CompareReport {
    /// Flattened CSV, one row per arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,lambda,final_dsm,consistency_mean,mean_error,cov_error,energy_distance,mean_log_density\n",
        );
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                a.seed,
                a.lambda,
                a.final_dsm,
                a.consistency_mean,
                a.metrics.mean_error,
                a.metrics.cov_error,
                a.metrics.energy_distance,
                a.metrics.mean_log_density
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConstantDenoiser;
    use crate::gmm::{MixtureComponent, OracleDenoiser};
    use crate::rng::seed_rng;

    fn gmm_2d() -> GaussianMixture {
        GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.25,
                mean: vec![1.0, 1.0],
                var: 0.09,
            },
            MixtureComponent {
                weight: 0.25,
                mean: vec![-1.0, 1.0],
                var: 0.09,
            },
            MixtureComponent {
                weight: 0.25,
                mean: vec![1.0, -1.0],
                var: 0.09,
            },
            MixtureComponent {
                weight: 0.25,
                mean: vec![-1.0, -1.0],
                var: 0.09,
            },
        ])
        .unwrap()
    }

    #[test]
    fn energy_distance_properties() {
        let g = gmm_2d();
        let a = g.sample(300, &mut seed_rng(1));
        let b = g.sample(400, &mut seed_rng(2));
        let dab = energy_distance(&a, &b);
        let dba = energy_distance(&b, &a);
        assert!((dab - dba).abs() < 1e-12, "symmetry");
        assert_eq!(energy_distance(&a, &a), 0.0, "self distance");
        assert!(dab >= 0.0);
    }

    #[test]
    fn self_samples_stay_below_noise_floor() {
        let g = gmm_2d();
        let samples = g.sample(2000, &mut seed_rng(3));
        let oracle = g.sample(4000, &mut seed_rng(4));
        let self_ed = energy_distance(&samples, &oracle);
        // noise floor from two further independent oracle draws
        let fa = energy_distance(
            &g.sample(2000, &mut seed_rng(5)),
            &g.sample(4000, &mut seed_rng(6)),
        );
        let fb = energy_distance(
            &g.sample(2000, &mut seed_rng(7)),
            &g.sample(4000, &mut seed_rng(8)),
        );
        let floor = fa.max(fb);
        assert!(
            self_ed <= 3.0 * floor,
            "self {self_ed} vs floor {floor}"
        );
    }

    #[test]
    fn shifted_samples_show_their_shift() {
        let g = gmm_2d();
        let oracle = g.sample(4000, &mut seed_rng(9));
        let shifted: Vec<Vec<f64>> = g
            .sample(2000, &mut seed_rng(10))
            .into_iter()
            .map(|x| x.iter().map(|v| v + 1.0).collect())
            .collect();
        let m = distribution_distance(&shifted, &g, &oracle).unwrap();
        let want = (2.0f64).sqrt(); // +1 in every coordinate, d = 2
        assert!(
            (m.mean_error - want).abs() < 0.1,
            "mean error {} vs {want}",
            m.mean_error
        );
        assert!(m.energy_distance > 0.1);
    }

    #[test]
    fn metrics_are_deterministic_given_sets() {
        let g = gmm_2d();
        let samples = g.sample(1200, &mut seed_rng(11));
        let oracle = g.sample(1500, &mut seed_rng(12));
        let a = distribution_distance(&samples, &g, &oracle).unwrap();
        let b = distribution_distance(&samples, &g, &oracle).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_denoiser_has_zero_violation() {
        let g = gmm_2d();
        let s = NoiseSchedule::default();
        let c = ConstantDenoiser(vec![0.1, -0.2]);
        let probe = ProbeConfig {
            n_probes: 64,
            ..ProbeConfig::default()
        };
        let report = consistency_violation(&c, &g, &s, &probe, &mut seed_rng(13)).unwrap();
        for (t, v) in report {
            assert_eq!(v, 0.0, "t={t}");
        }
    }

    #[test]
    fn violation_mean_is_permutation_invariant() {
        let g = gmm_2d();
        let s = NoiseSchedule::default();
        let oracle = OracleDenoiser::new(g.clone());
        let probe = ProbeConfig {
            n_probes: 128,
            ..ProbeConfig::default()
        };
        let cond = oracle.no_cond();
        let values =
            consistency_violation_values(&oracle, &g, &s, 1.0, &probe, &cond, &mut seed_rng(14))
                .unwrap();
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let mut shuffled = values.clone();
        shuffled.reverse();
        shuffled.swap(0, 64);
        let mean_shuffled: f64 = shuffled.iter().sum::<f64>() / shuffled.len() as f64;
        assert!((mean - mean_shuffled).abs() < 1e-12);
    }

    #[test]
    fn oracle_k_sweep_decreases() {
        let g = gmm_2d();
        let s = NoiseSchedule::default();
        let oracle = OracleDenoiser::new(g.clone());
        let points = consistency_k_sweep(
            &oracle,
            &g,
            &s,
            &[4, 8, 16],
            0.05,
            8,
            400,
            &[0.5, 1.0, 3.0],
            77,
        )
        .unwrap();
        assert_eq!(points.len(), 3);
        for w in points.windows(2) {
            assert!(
                w[1].mean <= w[0].mean + 2.0 * (w[0].std_err + w[1].std_err),
                "k={} mean={} vs k={} mean={}",
                w[0].k,
                w[0].mean,
                w[1].k,
                w[1].mean
            );
        }
        assert!(
            points[2].mean < points[0].mean,
            "k=16 {} should be below k=4 {}",
            points[2].mean,
            points[0].mean
        );
    }

    #[test]
    fn k_sweep_validates_divisibility() {
        let g = gmm_2d();
        let s = NoiseSchedule::default();
        let oracle = OracleDenoiser::new(g.clone());
        assert!(
            consistency_k_sweep(&oracle, &g, &s, &[3, 16], 0.05, 2, 8, &[1.0], 1).is_err()
        );
    }

    #[test]
    fn oracle_null_comparison_is_indistinguishable() {
        // identical denoisers in both arms: the metric gap must be within
        // Monte-Carlo noise (here, tiny relative to the metric scale)
        let g = gmm_2d();
        let s = NoiseSchedule::default();
        let oracle = OracleDenoiser::new(g.clone());
        let sampler = SamplerParams {
            n_steps: 8,
            prior_center: crate::samplers::PriorCenter::Zero,
            ..SamplerParams::default()
        };
        let a = drift_report(&oracle, &g, &s, &sampler, &ProbeConfig::default(), 2000, 4000, 1)
            .unwrap();
        let b = drift_report(&oracle, &g, &s, &sampler, &ProbeConfig::default(), 2000, 4000, 2)
            .unwrap();
        let rel = (a.metrics.energy_distance - b.metrics.energy_distance).abs();
        assert!(rel < 0.05, "energy gap {rel}");
        let va: f64 = a.consistency.iter().map(|(_, v)| v).sum();
        let vb: f64 = b.consistency.iter().map(|(_, v)| v).sum();
        assert!((va - vb).abs() / va.max(vb) < 0.5, "violation {va} vs {vb}");
    }

    #[test]
    fn compare_smoke_contains_both_arms_per_seed() {
        let g = gmm_2d();
        let s = NoiseSchedule::default();
        let base = TrainConfig {
            n_steps: 30,
            batch_size: 8,
            k_rollout: 2,
            ..TrainConfig::default()
        };
        let net = DenoiserConfig {
            data_dim: 2,
            hidden_dim: 16,
            n_hidden: 2,
            fourier_dim: 8,
            speaker_dim: 4,
        };
        let sampler = SamplerParams {
            n_steps: 8,
            ..SamplerParams::default()
        };
        let cfg = CompareConfig {
            n_seeds: 2,
            n_eval_samples: 1000,
            n_oracle_samples: 1000,
            probe: ProbeConfig {
                n_probes: 32,
                t_grid: vec![0.5, 2.0],
                ..ProbeConfig::default()
            },
        };
        let report = compare_cdm_vs_dsm(&g, &s, &base, net, &sampler, &cfg).unwrap();
        assert_eq!(report.arms.len(), 4);
        for seed in 0..2 {
            let with: Vec<_> = report
                .arms
                .iter()
                .filter(|a| a.seed == seed && a.lambda > 0.0)
                .collect();
            let without: Vec<_> = report
                .arms
                .iter()
                .filter(|a| a.seed == seed && a.lambda == 0.0)
                .collect();
            assert_eq!(with.len(), 1);
            assert_eq!(without.len(), 1);
        }
        // deterministic given config
        let again = compare_cdm_vs_dsm(&g, &s, &base, net, &sampler, &cfg).unwrap();
        assert_eq!(report, again);

        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5);
    }
}
