//! The parametric denoiser: a small MLP that predicts the clean data vector
//! from `(x_t, noise level, conditioning)`, with hand-written forward and
//! backward passes.
//!
//! Input features are the concatenation of
//! `[x_t / sqrt(1 + sigma^2), fourier(ln sigma), mu, speaker embedding]`.
//! The scaling keeps the first block near unit range across the whole noise
//! range; the Fourier ladder gives the net a smooth multi-scale view of the
//! noise level. The network predicts the clean vector directly; the score is
//! recovered through Tweedie's formula where needed.

use crate::error::{Error, Result};
use crate::nn::{tanh_backward, tanh_inplace, Dense, GradCheckReport};
use crate::schedule::DataPoint;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Conditioning of the denoiser: a frame-level prior mean and a speaker
/// embedding. Zero vectors mean "unconditioned".
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub mu: Vec<f64>,
    pub speaker: Vec<f64>,
}

impl Conditioning {
    pub fn none(data_dim: usize, speaker_dim: usize) -> Self {
        Self {
            mu: vec![0.0; data_dim],
            speaker: vec![0.0; speaker_dim],
        }
    }
}

/// Anything that can predict the clean data vector at a given noise level:
/// the trained network, the closed-form mixture oracle, or a constant.
pub trait Denoiser {
    fn data_dim(&self) -> usize;

    /// Width of the speaker block this denoiser expects in its conditioning;
    /// 0 for models that ignore conditioning.
    fn speaker_dim(&self) -> usize {
        0
    }

    /// Unconditioned input of the right shape for this denoiser.
    fn no_cond(&self) -> Conditioning {
        Conditioning::none(self.data_dim(), self.speaker_dim())
    }

    fn denoise(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> Result<DataPoint>;
}

/// Denoiser that always returns the same vector. Constant functions are
/// trivially consistent, which makes this useful as a null model.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser(pub Vec<f64>);

impl Denoiser for ConstantDenoiser {
    fn data_dim(&self) -> usize {
        self.0.len()
    }

    fn denoise(&self, _x: &[f64], _sigma: f64, _cond: &Conditioning) -> Result<DataPoint> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Dimension of the data vectors (channels).
    pub data_dim: usize,
    /// Width of the two hidden layers.
    pub hidden_dim: usize,
    /// Number of hidden layers.
    pub n_hidden: usize,
    /// Channels of the noise-level embedding (sin/cos pairs, must be even).
    pub fourier_dim: usize,
    /// Dimension of the speaker embedding block.
    pub speaker_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 16,
            hidden_dim: 128,
            n_hidden: 2,
            fourier_dim: 16,
            speaker_dim: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_dim == 0 || self.n_hidden == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        if self.fourier_dim % 2 != 0 || self.fourier_dim == 0 {
            return Err(Error::Config(format!(
                "fourier_dim must be a positive even number, got {}",
                self.fourier_dim
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.fourier_dim + self.data_dim + self.speaker_dim
    }
}

/// MLP denoiser. Hidden layers use tanh; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub layers: Vec<Dense>,
    /// Fixed frequencies of the noise-level embedding (not trained).
    pub fourier_freqs: Vec<f64>,
}

/// Gradients mirroring [`DenoiserNet::layers`].
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DenoiserGrads {
    pub fn zeros(net: &DenoiserNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for (gw, gb) in &mut self.layers {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (gw, gb) in &self.layers {
            out.extend_from_slice(gw);
            out.extend_from_slice(gb);
        }
    }
}

/// Activations saved by [`DenoiserNet::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    x_scale: f64,
    pub output: DataPoint,
}

/// Gradients of a scalar loss with respect to the network inputs.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub speaker: Vec<f64>,
}

impl DenoiserNet {
    /// Training initialization: scaled-uniform hidden layers, zero output
    /// layer, so the initial prediction is identically zero.
    pub fn init(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::init_random(config, rng)?;
        let last = net.layers.last_mut().expect("at least one layer");
        last.w.iter_mut().for_each(|v| *v = 0.0);
        last.b.iter_mut().for_each(|v| *v = 0.0);
        Ok(net)
    }

    /// Fully random initialization (output layer included); used by the
    /// gradient checker so that no gradient path is degenerate.
    pub fn init_random(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat(config.hidden_dim).take(config.n_hidden));
        dims.push(config.data_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::init_uniform(w[0], w[1], rng))
            .collect();
        let half = config.fourier_dim / 2;
        let fourier_freqs = (0..half).map(|k| 0.25 * 2f64.powf(k as f64 / 2.0)).collect();
        Ok(Self {
            config,
            layers,
            fourier_freqs,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    pub fn unflatten_from(&mut self, src: &[f64]) -> Result<usize> {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            let nb = l.b.len();
            if off + nw + nb > src.len() {
                return Err(Error::Shape {
                    what: "denoiser unflatten",
                    expected: off + nw + nb,
                    got: src.len(),
                });
            }
            l.w.copy_from_slice(&src[off..off + nw]);
            off += nw;
            l.b.copy_from_slice(&src[off..off + nb]);
            off += nb;
        }
        Ok(off)
    }

    fn check_inputs(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> Result<()> {
        let d = self.config.data_dim;
        if x.len() != d {
            return Err(Error::Shape {
                what: "denoiser input x",
                expected: d,
                got: x.len(),
            });
        }
        if cond.mu.len() != d {
            return Err(Error::Shape {
                what: "denoiser conditioning mu",
                expected: d,
                got: cond.mu.len(),
            });
        }
        if cond.speaker.len() != self.config.speaker_dim {
            return Err(Error::Shape {
                what: "denoiser speaker embedding",
                expected: self.config.speaker_dim,
                got: cond.speaker.len(),
            });
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Domain {
                what: "denoiser sigma",
                value: sigma,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "denoiser input at sigma={sigma}"
            )));
        }
        Ok(())
    }

    fn build_features(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> (Vec<f64>, f64) {
        let mut feat = Vec::with_capacity(self.config.input_dim());
        let x_scale = 1.0 / (1.0 + sigma * sigma).sqrt();
        feat.extend(x.iter().map(|v| v * x_scale));
        let u = sigma.ln();
        for f in &self.fourier_freqs {
            feat.push((f * u).sin());
            feat.push((f * u).cos());
        }
        feat.extend_from_slice(&cond.mu);
        feat.extend_from_slice(&cond.speaker);
        debug_assert_eq!(feat.len(), self.config.input_dim());
        (feat, x_scale)
    }

    pub fn forward(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> Result<DataPoint> {
        Ok(self.forward_cached(x, sigma, cond)?.output)
    }

    pub fn forward_cached(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> Result<ForwardCache> {
        self.check_inputs(x, sigma, cond)?;
        let (features, x_scale) = self.build_features(x, sigma, cond);
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = features.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim];
            layer.forward_into(&cur, &mut next);
            if i + 1 < self.layers.len() {
                tanh_inplace(&mut next);
                hidden.push(next.clone());
                cur = next;
            } else {
                cur = next;
            }
        }
        Ok(ForwardCache {
            features,
            hidden,
            x_scale,
            output: cur,
        })
    }

    /// Reverse-mode pass for one element. Parameter gradients accumulate into
    /// `grads`; input gradients (needed for conditioning and for
    /// backpropagation through rollouts) are returned when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut DenoiserGrads,
        want_input_grads: bool,
    ) -> Option<InputGrads> {
        let n_layers = self.layers.len();
        let mut dy = upstream.to_vec();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let input: &[f64] = if li == 0 {
                &cache.features
            } else {
                &cache.hidden[li - 1]
            };
            let mut dx = vec![0.0; layer.in_dim];
            let (gw, gb) = &mut grads.layers[li];
            layer.backward(input, &dy, &mut dx, gw, gb);
            if li == 0 {
                if want_input_grads {
                    let d = self.config.data_dim;
                    let f = self.config.fourier_dim;
                    return Some(InputGrads {
                        x: dx[..d].iter().map(|v| v * cache.x_scale).collect(),
                        mu: dx[d + f..d + f + d].to_vec(),
                        speaker: dx[d + f + d..].to_vec(),
                    });
                }
                return None;
            }
            // dx holds the gradient w.r.t. the previous layer's
            // post-activation; undo the tanh before descending.
            tanh_backward(&cache.hidden[li - 1], &mut dx);
            dy = dx;
        }
        None
    }
}

impl Denoiser for DenoiserNet {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn speaker_dim(&self) -> usize {
        self.config.speaker_dim
    }

    fn denoise(&self, x: &[f64], sigma: f64, cond: &Conditioning) -> Result<DataPoint> {
        self.forward(x, sigma, cond)
    }
}

/// Trainable per-speaker embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTable {
    pub emb: Vec<f64>,
    pub n_speakers: usize,
    pub dim: usize,
}

impl SpeakerTable {
    pub fn init(n_speakers: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let emb = (0..n_speakers * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            emb,
            n_speakers,
            dim,
        }
    }

    pub fn lookup(&self, id: usize) -> Result<&[f64]> {
        if id >= self.n_speakers {
            return Err(Error::Lookup {
                what: "speaker id",
                index: id,
                len: self.n_speakers,
            });
        }
        Ok(&self.emb[id * self.dim..(id + 1) * self.dim])
    }

    pub fn param_count(&self) -> usize {
        self.emb.len()
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerTableGrads {
    pub emb: Vec<f64>,
}

impl SpeakerTableGrads {
    pub fn zeros(table: &SpeakerTable) -> Self {
        Self {
            emb: vec![0.0; table.emb.len()],
        }
    }

    pub fn reset(&mut self) {
        self.emb.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn accumulate(&mut self, table: &SpeakerTable, id: usize, d_emb: &[f64]) {
        let row = &mut self.emb[id * table.dim..(id + 1) * table.dim];
        for (g, d) in row.iter_mut().zip(d_emb) {
            *g += d;
        }
    }
}

/// One probe of the gradient checker: an input point, a noise level,
/// conditioning, and a regression target.
#[derive(Debug, Clone)]
pub struct GradCheckProbe {
    pub x: Vec<f64>,
    pub sigma: f64,
    pub cond: Conditioning,
    pub target: Vec<f64>,
}

/// Compares analytic gradients of `1/2 sum ||net(x) - target||^2` over the
/// probe batch against central finite differences (step 1e-5) on `n_params`
/// randomly chosen parameters.
pub fn gradcheck(
    net: &DenoiserNet,
    probes: &[GradCheckProbe],
    n_params: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    gradcheck_impl(net, probes, n_params, tol, rng, None)
}

pub(crate) fn gradcheck_impl(
    net: &DenoiserNet,
    probes: &[GradCheckProbe],
    n_params: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
    tamper: Option<(usize, f64)>,
) -> Result<GradCheckReport> {
    if probes.is_empty() {
        return Err(Error::Config("gradcheck needs a nonempty probe batch".into()));
    }
    let mut grads = DenoiserGrads::zeros(net);
    for p in probes {
        let cache = net.forward_cached(&p.x, p.sigma, &p.cond)?;
        let upstream: Vec<f64> = cache
            .output
            .iter()
            .zip(&p.target)
            .map(|(o, t)| o - t)
            .collect();
        net.backward(&cache, &upstream, &mut grads, false);
    }
    let mut analytic = Vec::with_capacity(net.param_count());
    grads.flatten_into(&mut analytic);
    if let Some((idx, factor)) = tamper {
        analytic[idx] *= factor;
    }

    let mut flat = Vec::with_capacity(net.param_count());
    net.flatten_into(&mut flat);
    let indices = crate::nn::sample_indices(flat.len(), n_params, rng);
    let probes = probes.to_vec();
    let mut scratch = net.clone();
    let report = crate::nn::finite_diff_check(
        &mut flat,
        |params| {
            scratch.unflatten_from(params).expect("same layout");
            let mut loss = 0.0;
            for p in &probes {
                let out = scratch.forward(&p.x, p.sigma, &p.cond).expect("probe eval");
                loss += 0.5
                    * out
                        .iter()
                        .zip(&p.target)
                        .map(|(o, t)| (o - t) * (o - t))
                        .sum::<f64>();
            }
            loss
        },
        &analytic,
        &indices,
        1e-5,
        tol,
    );
    Ok(report)
}
