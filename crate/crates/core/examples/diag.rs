//! Scratch diagnostics for the paired comparison.

use cdm_core::denoiser::{Denoiser, DenoiserConfig};
use cdm_core::drift::energy_distance;
use cdm_core::gmm::{GaussianMixture, MixtureComponent, OracleDenoiser};
use cdm_core::losses::{train_toy, TrainConfig};
use cdm_core::rng::{seed_rng, stream_rng};
use cdm_core::samplers::{stochastic_heun_sample, PriorCenter, SamplerParams};
use cdm_core::schedule::NoiseSchedule;

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
    let net_cfg = DenoiserConfig {
        data_dim: 2,
        hidden_dim: 64,
        n_hidden: 2,
        fourier_dim: 16,
        speaker_dim: 16,
    };
    let n_steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1500);

    let oracle = OracleDenoiser::new(gmm.clone());
    let oracle_ref = gmm.sample(10_000, &mut seed_rng(999));

    let sampler8 = SamplerParams {
        n_steps: 8,
        s_max: 10.0,
        prior_center: PriorCenter::Zero,
        ..SamplerParams::default()
    };
    let heun8 = SamplerParams {
        s_churn: 0.0,
        ..sampler8
    };
    let heun64 = SamplerParams {
        n_steps: 64,
        ..heun8
    };

    let eval = |name: &str, d: &dyn Denoiser, p: &SamplerParams, seed: u64| {
        let cond = d.no_cond();
        let mut rng = stream_rng(seed, 50);
        let samples: Vec<Vec<f64>> = (0..4000)
            .map(|_| stochastic_heun_sample(d, &cond, p, &mut rng).unwrap())
            .collect();
        let e = energy_distance(&samples, &oracle_ref);
        let mut mean = [0.0f64; 2];
        for s in &samples {
            mean[0] += s[0] / 4000.0;
            mean[1] += s[1] / 4000.0;
        }
        println!("  {name}: energy={e:.4e} sample_mean=({:+.3},{:+.3})", mean[0], mean[1]);
    };

    println!("oracle baselines:");
    eval("oracle churn8 ", &oracle, &sampler8, 1);
    eval("oracle heun8  ", &oracle, &heun8, 1);
    eval("oracle heun64 ", &oracle, &heun64, 1);

    let m: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let eps: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let t_min: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    for lambda in [2.0, 0.0] {
        let cfg = TrainConfig {
            lambda,
            n_steps,
            batch_size: 64,
            lr,
            rollout_samples: m,
            epsilon: eps,
            t_sample_min: t_min,
            seed: 0,
            ..TrainConfig::default()
        };
        let run = train_toy(&gmm, &schedule, &cfg, net_cfg).unwrap();
        let net = run.state.net;
        println!("lambda={lambda} after {} steps (final dsm {:.3}):", n_steps, run.history.last().unwrap().l_dsm);
        // denoiser error vs the oracle across noise levels
        for &sigma in &[0.05, 0.5, 2.0, 5.0, 10.0, 14.9] {
            let marginal = gmm.marginal_at(sigma).unwrap();
            let mut rng = seed_rng(7);
            let mut err = 0.0;
            let mut hbar = [0.0f64; 2];
            let n = 400;
            for _ in 0..n {
                let x = marginal.sample_one(&mut rng);
                let h_net = net.forward(&x, sigma, &net.no_cond()).unwrap();
                let h_true = oracle.denoise(&x, sigma, &oracle.no_cond()).unwrap();
                err += ((h_net[0] - h_true[0]).powi(2) + (h_net[1] - h_true[1]).powi(2)).sqrt() / n as f64;
                hbar[0] += h_net[0] / n as f64;
                hbar[1] += h_net[1] / n as f64;
            }
            println!("  sigma={sigma:5}: mean |h_net - h*| = {err:.4}  mean h_net = ({:+.3},{:+.3})", hbar[0], hbar[1]);
        }
        eval("churn8", &net, &sampler8, 1);
        eval("heun8 ", &net, &heun8, 1);
        eval("heun64", &net, &heun64, 1);
    }
}
