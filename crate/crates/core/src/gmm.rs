//! Isotropic Gaussian mixtures with closed forms for everything the diffusion
//! machinery needs: the noised marginal, its score, the exact posterior-mean
//! denoiser, and log densities. These serve as ground truth when checking the
//! numerical pipeline.
//!
//! Responsibilities are computed in the log domain with max subtraction so
//! that scores stay finite far from the modes.

use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::DataPoint;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// One mixture component: weight, mean vector, isotropic variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    dim: usize,
}

impl TryFrom<Vec<MixtureComponent>> for GaussianMixture {
    type Error = Error;
    fn try_from(components: Vec<MixtureComponent>) -> Result<Self> {
        GaussianMixture::new(components)
    }
}

impl From<GaussianMixture> for Vec<MixtureComponent> {
    fn from(g: GaussianMixture) -> Self {
        g.components
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let dim = components[0].mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture components must have dim > 0".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::Shape {
                    what: "mixture component mean",
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Config(format!("weight must be > 0, got {}", c.weight)));
            }
            if !(c.var > 0.0 && c.var.is_finite()) {
                return Err(Error::Config(format!("var must be > 0, got {}", c.var)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights must sum to 1, got {total}")));
        }
        Ok(Self { components, dim })
    }

    /// Single isotropic Gaussian.
    pub fn gaussian(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean,
            var,
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Marginal of the forward process at noise level `sigma`: each component
    /// variance grows by `sigma^2`, weights and means unchanged.
    pub fn marginal_at(&self, sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Domain {
                what: "marginal_at: sigma",
                value: sigma,
            });
        }
        let components = self
            .components
            .iter()
            .map(|c| MixtureComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                var: c.var + sigma * sigma,
            })
            .collect();
        Ok(Self {
            components,
            dim: self.dim,
        })
    }

    /// Log density `log sum_i w_i N(x; m_i, s_i^2 I)` via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_terms(x)?))
    }

    /// `log w_i + log N(x; m_i, s_i^2 I)` for each component.
    fn component_log_terms(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                what: "gmm query point",
                expected: self.dim,
                got: x.len(),
            });
        }
        let d = self.dim as f64;
        Ok(self
            .components
            .iter()
            .map(|c| {
                let sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum();
                c.weight.ln() - 0.5 * d * (2.0 * PI * c.var).ln() - 0.5 * sq / c.var
            })
            .collect())
    }

    /// Posterior responsibilities of each component at `x`.
    fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let log_terms = self.component_log_terms(x)?;
        let lse = log_sum_exp(&log_terms);
        Ok(log_terms.iter().map(|lt| (lt - lse).exp()).collect())
    }

    /// Exact score of the noised marginal at level `sigma`:
    /// `sum_i gamma_i(x) (m_i - x) / (s_i^2 + sigma^2)` with responsibilities
    /// taken under the marginal.
    pub fn exact_score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let marg = self.marginal_at(sigma)?;
        let gamma = marg.responsibilities(x)?;
        let mut score = vec![0.0; self.dim];
        for (c, g) in marg.components.iter().zip(&gamma) {
            for (i, (m, xi)) in c.mean.iter().zip(x).enumerate() {
                score[i] += g * (m - xi) / c.var;
            }
        }
        Ok(score)
    }

    /// Exact denoiser `E[x0 | x_t = x]` at level `sigma`:
    /// `sum_i gamma_i(x) (sigma^2 m_i + s_i^2 x) / (s_i^2 + sigma^2)`.
    pub fn exact_denoiser(&self, x: &[f64], sigma: f64) -> Result<DataPoint> {
        let marg = self.marginal_at(sigma)?;
        let gamma = marg.responsibilities(x)?;
        let s2 = sigma * sigma;
        let mut out = vec![0.0; self.dim];
        for (c0, (cm, g)) in self
            .components
            .iter()
            .zip(marg.components.iter().zip(&gamma))
        {
            for (i, (m, xi)) in cm.mean.iter().zip(x).enumerate() {
                out[i] += g * (s2 * m + c0.var * xi) / cm.var;
            }
        }
        Ok(out)
    }

    /// Trace of the posterior covariance `Cov(x0 | x_t = x)` at level `sigma`.
    /// Together with Monte-Carlo sampling of `x_t` this gives an independent
    /// route to the irreducible score-matching loss.
    pub fn posterior_trace_cov(&self, x: &[f64], sigma: f64) -> Result<f64> {
        let marg = self.marginal_at(sigma)?;
        let gamma = marg.responsibilities(x)?;
        let s2 = sigma * sigma;
        let d = self.dim as f64;
        let h = self.exact_denoiser(x, sigma)?;
        let mut second_moment = 0.0;
        for (c0, (cm, g)) in self
            .components
            .iter()
            .zip(marg.components.iter().zip(&gamma))
        {
            let post_var = c0.var * s2 / cm.var;
            let mut norm_post_mean = 0.0;
            for (m, xi) in cm.mean.iter().zip(x) {
                let pm = (s2 * m + c0.var * xi) / cm.var;
                norm_post_mean += pm * pm;
            }
            second_moment += g * (d * post_var + norm_post_mean);
        }
        let norm_h: f64 = h.iter().map(|v| v * v).sum();
        Ok(second_moment - norm_h)
    }

    /// i.i.d. draws: categorical component choice, then an isotropic Gaussian
    /// draw. Deterministic given the generator state.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<DataPoint> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.sample_one(rng));
        }
        out
    }

    pub fn sample_one(&self, rng: &mut ChaCha8Rng) -> DataPoint {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let sd = c.var.sqrt();
        c.mean
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + sd * z
            })
            .collect()
    }

    /// Mixture mean `sum_i w_i m_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// Mixture covariance `sum_i w_i (s_i^2 I + m_i m_i^T) - m m^T`,
    /// row-major `dim x dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    let mut v = c.weight * c.mean[i] * c.mean[j];
                    if i == j {
                        v += c.weight * c.var;
                    }
                    cov[i * d + j] += v;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= mean[i] * mean[j];
            }
        }
        cov
    }
}

/// The exact denoiser of a mixture, usable anywhere a [`Denoiser`] is
/// expected. Conditioning is ignored; the oracle already knows the target
/// distribution.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    gmm: GaussianMixture,
}

impl OracleDenoiser {
    pub fn new(gmm: GaussianMixture) -> Self {
        Self { gmm }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.gmm
    }
}

impl Denoiser for OracleDenoiser {
    fn data_dim(&self) -> usize {
        self.gmm.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64, _cond: &Conditioning) -> Result<DataPoint> {
        self.gmm.exact_denoiser(x, sigma)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    fn std_normal_1d() -> GaussianMixture {
        GaussianMixture::gaussian(vec![0.0], 1.0).unwrap()
    }

    fn two_comp_1d() -> GaussianMixture {
        GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![-2.0],
                var: 1.0,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![2.0],
                var: 4.0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn construction_validates() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![MixtureComponent {
            weight: 0.9,
            mean: vec![0.0],
            var: 1.0
        }])
        .is_err());
        assert!(GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0],
                var: 1.0
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0, 1.0],
                var: 1.0
            },
        ])
        .is_err());
    }

    #[test]
    fn marginal_adds_sigma_squared() {
        let g = std_normal_1d().marginal_at(1.0).unwrap();
        assert_eq!(g.components()[0].var, 2.0);

        let g = two_comp_1d().marginal_at(2.0).unwrap();
        assert_eq!(g.components()[0].var, 5.0);
        assert_eq!(g.components()[1].var, 8.0);

        let g = two_comp_1d().marginal_at(0.002).unwrap();
        assert!((g.components()[0].var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn score_of_single_gaussian() {
        let g = std_normal_1d();
        // score of N(0, 1 + 1) at x=2 is -2/2 = -1
        let s = g.exact_score(&[2.0], 1.0).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-14);

        // linear in x with slope -1/(s^2 + sigma^2)
        let g = GaussianMixture::gaussian(vec![0.7], 2.5).unwrap();
        let sigma = 1.3;
        let slope = -1.0 / (2.5 + sigma * sigma);
        for &x in &[-3.0, 0.0, 1.0, 4.2] {
            let s = g.exact_score(&[x], sigma).unwrap();
            assert!((s[0] - slope * (x - 0.7)).abs() < 1e-12);
        }
    }

    #[test]
    fn score_symmetric_mixture_vanishes_at_center() {
        let g = GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![-1.5],
                var: 0.5,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![1.5],
                var: 0.5,
            },
        ])
        .unwrap();
        let s = g.exact_score(&[0.0], 0.8).unwrap();
        assert!(s[0].abs() < 1e-14);
    }

    #[test]
    fn score_stays_finite_far_out() {
        let g = two_comp_1d();
        for &x in &[-1e3, 1e3] {
            let s = g.exact_score(&[x], 0.5).unwrap();
            assert!(s[0].is_finite());
        }
    }

    #[test]
    fn denoiser_of_single_gaussian() {
        let g = std_normal_1d();
        let h = g.exact_denoiser(&[2.0], 1.0).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn denoiser_collapses_on_point_mass() {
        let g = GaussianMixture::gaussian(vec![3.0], 1e-8).unwrap();
        for &x in &[-5.0, 0.0, 9.0] {
            let h = g.exact_denoiser(&[x], 1.0).unwrap();
            assert!((h[0] - 3.0).abs() < 1e-6, "x={x}: h={}", h[0]);
        }
    }

    #[test]
    fn tweedie_consistency_of_closed_forms() {
        let g = two_comp_1d();
        let mut rng = seed_rng(3);
        for _ in 0..1000 {
            let x = vec![rng.gen_range(-8.0..8.0)];
            let sigma = rng.gen_range(0.01..10.0);
            let h = g.exact_denoiser(&x, sigma).unwrap();
            let s = g.exact_score(&x, sigma).unwrap();
            let h2 = x[0] + sigma * sigma * s[0];
            assert!((h[0] - h2).abs() < 1e-10, "sigma={sigma} x={:?}", x);
        }
    }

    #[test]
    fn log_density_values() {
        let g = std_normal_1d();
        let ld = g.log_density(&[0.0]).unwrap();
        assert!((ld - (-0.9189385332046727)).abs() < 1e-12);

        // equal mixture of two identical components = single component
        let dup = GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.3],
                var: 1.7,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.3],
                var: 1.7,
            },
        ])
        .unwrap();
        let single = GaussianMixture::gaussian(vec![0.3], 1.7).unwrap();
        for &x in &[-2.0, 0.0, 5.0] {
            assert!(
                (dup.log_density(&[x]).unwrap() - single.log_density(&[x]).unwrap()).abs() < 1e-14
            );
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // trapezoid quadrature on a wide 1-D grid
        let g = two_comp_1d();
        let (lo, hi, n) = (-30.0, 30.0, 60_000);
        let dx = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * dx;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * g.log_density(&[x]).unwrap().exp();
        }
        total *= dx;
        assert!((total - 1.0).abs() < 1e-4, "integral={total}");
    }

    #[test]
    fn score_is_gradient_of_log_marginal() {
        let g = two_comp_1d();
        let sigma = 0.7;
        let marg = g.marginal_at(sigma).unwrap();
        let mut rng = seed_rng(5);
        let h = 1e-5;
        for _ in 0..200 {
            let x = rng.gen_range(-6.0..6.0);
            let fd = (marg.log_density(&[x + h]).unwrap() - marg.log_density(&[x - h]).unwrap())
                / (2.0 * h);
            let s = g.exact_score(&[x], sigma).unwrap()[0];
            let denom = (s.abs() + fd.abs()).max(1e-3);
            assert!(
                (s - fd).abs() / denom < 1e-6,
                "x={x}: score={s} fd={fd}"
            );
        }
    }

    #[test]
    fn sampling_moments_and_determinism() {
        let g = std_normal_1d();
        let mut rng = seed_rng(17);
        let xs = g.sample(100_000, &mut rng);
        let mean: f64 = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        let var: f64 = xs.iter().map(|x| (x[0] - mean) * (x[0] - mean)).sum::<f64>()
            / xs.len() as f64;
        assert!(mean.abs() < 0.02, "mean={mean}");
        assert!((var - 1.0).abs() < 0.02, "var={var}");

        let a = g.sample(16, &mut seed_rng(123));
        let b = g.sample(16, &mut seed_rng(123));
        assert_eq!(a, b);

        let tiny = GaussianMixture::gaussian(vec![4.0], 1e-12).unwrap();
        for x in tiny.sample(100, &mut seed_rng(1)) {
            assert!((x[0] - 4.0).abs() < 1e-4);
        }
    }

    #[test]
    fn serde_round_trip() {
        let g = two_comp_1d();
        let json = serde_json::to_string(&g).unwrap();
        let back: GaussianMixture = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);

        // invalid weights rejected at parse time
        let bad = r#"[{"weight": 0.9, "mean": [0.0], "var": 1.0}]"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }
}
