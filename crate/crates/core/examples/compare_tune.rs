//! Scratch harness for sizing the paired comparison experiment.

use cdm_core::denoiser::DenoiserConfig;
use cdm_core::drift::{compare_cdm_vs_dsm, CompareConfig, ProbeConfig};
use cdm_core::gmm::{GaussianMixture, MixtureComponent};
use cdm_core::losses::TrainConfig;
use cdm_core::samplers::{PriorCenter, SamplerParams};
use cdm_core::schedule::NoiseSchedule;
use std::time::Instant;

fn main() {
    let gmm = GaussianMixture::new(
        [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)]
            .iter()
            .map(|&(x, y)| MixtureComponent {
                weight: 0.25,
                mean: vec![x, y],
                var: 0.09,
            })
            .collect(),
    )
    .unwrap();
    let schedule = NoiseSchedule::default();
    let base = TrainConfig {
        lambda: 2.0,
        n_steps: std::env::args()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1500),
        batch_size: 64,
        lr: 1e-3,
        // the sampler grid reaches sigma_min; train the whole range so the
        // last solver steps stay inside the net's training domain
        t_sample_min: 0.002,
        rollout_samples: std::env::args()
            .nth(2)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1),
        ..TrainConfig::default()
    };
    let net = DenoiserConfig {
        data_dim: 2,
        hidden_dim: std::env::args()
            .nth(3)
            .and_then(|s| s.parse().ok())
            .unwrap_or(64),
        n_hidden: 2,
        fourier_dim: 16,
        speaker_dim: 16,
    };
    let sampler = SamplerParams {
        n_steps: 8,
        // churn gated inside the training range: raising the noise level
        // beyond sigma_max would make the nets extrapolate
        s_max: 10.0,
        prior_center: PriorCenter::Zero,
        ..SamplerParams::default()
    };
    let cfg = CompareConfig {
        n_seeds: 5,
        n_eval_samples: 4000,
        n_oracle_samples: 10_000,
        probe: ProbeConfig {
            m: 16,
            n_probes: 256,
            ..ProbeConfig::default()
        },
    };
    // probe-floor calibration: the exact denoiser's measured violation is
    // the estimator floor at this probe setting
    {
        use cdm_core::denoiser::Denoiser;
        use cdm_core::gmm::OracleDenoiser;
        let oracle = OracleDenoiser::new(gmm.clone());
        let mut rng = cdm_core::rng::stream_rng(0, 12345);
        let cond = oracle.no_cond();
        let mut vals = Vec::new();
        for &t in &cfg.probe.t_grid {
            let v = cdm_core::drift::consistency_violation_values(
                &oracle, &gmm, &schedule, t, &cfg.probe, &cond, &mut rng,
            )
            .unwrap();
            vals.push(v.iter().sum::<f64>() / v.len() as f64);
        }
        println!(
            "oracle violation floor: mean={:.5e} per-t={:?}",
            vals.iter().sum::<f64>() / vals.len() as f64,
            vals.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
        );
    }
    let started = Instant::now();
    let report = compare_cdm_vs_dsm(&gmm, &schedule, &base, net, &sampler, &cfg).unwrap();
    println!("elapsed: {:.1}s", started.elapsed().as_secs_f64());
    println!(
        "median violation: cdm={:.5e} dsm={:.5e}  ({})",
        report.median_violation_cdm,
        report.median_violation_dsm,
        if report.median_violation_cdm < report.median_violation_dsm {
            "PASS"
        } else {
            "FAIL"
        }
    );
    println!(
        "median energy:    cdm={:.5e} dsm={:.5e}  ({})",
        report.median_energy_cdm,
        report.median_energy_dsm,
        if report.median_energy_cdm < report.median_energy_dsm {
            "PASS"
        } else {
            "FAIL"
        }
    );
    for arm in &report.arms {
        println!(
            "  seed={} lambda={}: dsm={:.4} viol={:.5e} energy={:.5e} mean_err={:.4} cov_err={:.4} logp={:.3}",
            arm.seed,
            arm.lambda,
            arm.final_dsm,
            arm.consistency_mean,
            arm.metrics.energy_distance,
            arm.metrics.mean_error,
            arm.metrics.cov_error,
            arm.metrics.mean_log_density
        );
    }
}
