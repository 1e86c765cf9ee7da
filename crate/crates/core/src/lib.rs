//! Consistency-regularized denoising diffusion at desk scale.
//!
//! The crate is organized around a variance-exploding diffusion process with
//! the identity noise schedule (`sigma(t) = t`):
//!
//! - [`schedule`]: forward perturbation, Tweedie conversions between score and
//!   denoiser, and the backward SDE / probability-flow ODE drifts.
//! - [`gmm`]: isotropic Gaussian mixtures with closed-form marginals, scores,
//!   and posterior-mean denoisers, used as exact oracles.
//! - [`nn`]: dense layers, manual backprop, Adam, and a finite-difference
//!   gradient checker.
//! - [`denoiser`]: the conditional denoiser network and the [`denoiser::Denoiser`]
//!   trait shared by networks, oracles, and constants.
//! - [`losses`]: denoising score matching, the consistency loss with its
//!   backward-SDE rollout, prior/duration losses, and the toy training loop.
//! - [`samplers`]: Euler and Heun ODE solvers, Euler-Maruyama SDE integration,
//!   and the stochastic churn sampler.
//! - [`tts`]: synthetic multi-speaker corpus, prior encoder, duration
//!   predictor, length regulation, and joint training/synthesis.
//! - [`drift`]: consistency-violation probes, distribution distances, and the
//!   paired comparison of consistency-trained vs plain score-matching models.

pub mod denoiser;
pub mod drift;
pub mod error;
pub mod gmm;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod tts;

pub use denoiser::{Conditioning, ConstantDenoiser, Denoiser, DenoiserConfig, DenoiserNet};
pub use error::{Error, Result};
pub use gmm::{GaussianMixture, MixtureComponent};
pub use losses::TrainConfig;
pub use samplers::{PriorCenter, SamplerParams};
pub use schedule::{DataPoint, NoiseSchedule};
