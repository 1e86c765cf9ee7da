//! Scratch: locate the noise range where trained transport breaks, by
//! splicing the oracle above a split level and the net below it.

use cdm_core::denoiser::{Conditioning, Denoiser, DenoiserConfig, DenoiserNet};
use cdm_core::drift::energy_distance;
use cdm_core::error::Result;
use cdm_core::gmm::{GaussianMixture, MixtureComponent, OracleDenoiser};
use cdm_core::losses::{train_toy, TrainConfig};
use cdm_core::rng::{seed_rng, stream_rng};
use cdm_core::samplers::{stochastic_heun_sample, PriorCenter, SamplerParams};
use cdm_core::schedule::NoiseSchedule;

struct Hybrid<'a> {
    net: &'a DenoiserNet,
    oracle: &'a OracleDenoiser,
    split: f64,
}

impl Denoiser for Hybrid<'_> {
    fn data_dim(&self) -> usize {
        2
    }
    fn speaker_dim(&self) -> usize {
        self.net.config.speaker_dim
    }
    fn denoise(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> Result<Vec<f64>> {
        if sigma >= self.split {
            self.oracle.denoise(x, sigma, cond)
        } else {
            self.net.denoise(x, sigma, cond)
        }
    }
}

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
    let oracle = OracleDenoiser::new(gmm.clone());
    let oracle_ref = gmm.sample(10_000, &mut seed_rng(999));
    let sampler = SamplerParams {
        n_steps: 8,
        s_churn: 0.0,
        prior_center: PriorCenter::Zero,
        ..SamplerParams::default()
    };
    println!("grid: {:?}", sampler.time_grid());

    let cfg = TrainConfig {
        lambda: 0.0,
        n_steps: 1500,
        batch_size: 64,
        seed: 0,
        ..TrainConfig::default()
    };
    let net = train_toy(&gmm, &schedule, &cfg, net_cfg).unwrap().state.net;

    for split in [0.0, 0.3, 1.0, 3.0, 6.0, 16.0] {
        let hybrid = Hybrid {
            net: &net,
            oracle: &oracle,
            split,
        };
        let cond = hybrid.no_cond();
        let mut rng = stream_rng(1, 50);
        let samples: Vec<Vec<f64>> = (0..4000)
            .map(|_| stochastic_heun_sample(&hybrid, &cond, &sampler, &mut rng).unwrap())
            .collect();
        let e = energy_distance(&samples, &oracle_ref);
        // mode occupancy
        let modes = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];
        let mut counts = [0usize; 4];
        let mut dist_sum = 0.0;
        for s in &samples {
            let mut best = (f64::INFINITY, 0);
            for (i, m) in modes.iter().enumerate() {
                let d = ((s[0] - m.0).powi(2) + (s[1] - m.1).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, i);
                }
            }
            counts[best.1] += 1;
            dist_sum += best.0;
        }
        println!(
            "split={split:5}: energy={e:.4e} occupancy={:?} mean_dist_to_mode={:.3}",
            counts,
            dist_sum / samples.len() as f64
        );
    }
}
