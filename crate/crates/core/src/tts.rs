//! Miniature multi-speaker acoustic pipeline on synthetic data: a prior
//! encoder producing token-level means, a duration predictor on detached
//! token representations, a length regulator, and the conditional denoiser as
//! decoder. Training uses real durations for length regulation; inference
//! uses predicted ones.
//!
//! The synthetic corpus is built so that token identity, speaker identity,
//! and durations are all exactly known: the target frame for token `v` and
//! speaker `s` is `base_pattern(v) * speaker_scale(s) + speaker_bias(s)`
//! plus i.i.d. jitter, and the true duration is `2 + ((v + s) mod 5)`.

use crate::denoiser::{
    Conditioning, DenoiserConfig, DenoiserGrads, DenoiserNet, InputGrads, SpeakerTable,
    SpeakerTableGrads,
};
use crate::error::{Error, Result};
use crate::losses::{
    decode_duration, encode_duration, loss_cdm_grad, loss_dsm_grad, sample_cdm_draws,
    sample_dsm_draws, total_loss, BatchElem, HistoryRow, LossParts, TrainConfig,
};
use crate::nn::{tanh_backward, tanh_inplace, Adam, Dense};
use crate::rng::stream_rng;
use crate::samplers::{stochastic_heun_sample, SamplerParams};
use crate::schedule::NoiseSchedule;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Vocabulary size.
    pub vocab: usize,
    /// Number of speakers.
    pub speakers: usize,
    /// Channels per frame.
    pub channels: usize,
    pub utterances_per_speaker: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Standard deviation of the per-frame jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            speakers: 8,
            channels: 16,
            utterances_per_speaker: 12,
            min_tokens: 4,
            max_tokens: 10,
            jitter: 0.05,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0
            || self.speakers == 0
            || self.channels == 0
            || self.utterances_per_speaker == 0
        {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token length range invalid: [{}, {}]",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.jitter < 0.0 {
            return Err(Error::Config("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub token_ids: Vec<usize>,
    pub speaker_id: usize,
    /// Frames per token, each >= 1.
    pub durations: Vec<u32>,
    /// Target features, `total_frames x channels`.
    pub frames: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    /// Per-speaker channel scale, `speakers x channels`.
    pub speaker_scale: Vec<Vec<f64>>,
    /// Per-speaker channel bias, `speakers x channels`.
    pub speaker_bias: Vec<Vec<f64>>,
    pub utterances: Vec<Utterance>,
}

/// Deterministic per-token channel pattern `sin(pi (v+1)(c+1) / (d+1))`.
pub fn base_pattern(token: usize, channels: usize) -> Vec<f64> {
    let d = channels as f64;
    (0..channels)
        .map(|c| (std::f64::consts::PI * (token + 1) as f64 * (c + 1) as f64 / (d + 1.0)).sin())
        .collect()
}

/// Ground-truth duration in frames: `2 + ((v + s) mod 5)`, always in [2, 6].
pub fn true_duration(token: usize, speaker: usize) -> u32 {
    2 + ((token + speaker) % 5) as u32
}

/// Deterministic corpus generation from the config seed.
pub fn generate_corpus(config: &CorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, 0);
    let d = config.channels;
    let speaker_scale: Vec<Vec<f64>> = (0..config.speakers)
        .map(|_| (0..d).map(|_| rng.gen_range(0.5..1.5)).collect())
        .collect();
    let speaker_bias: Vec<Vec<f64>> = (0..config.speakers)
        .map(|_| (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect())
        .collect();

    let mut utterances = Vec::new();
    for s in 0..config.speakers {
        for _ in 0..config.utterances_per_speaker {
            let len = rng.gen_range(config.min_tokens..=config.max_tokens);
            let token_ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab)).collect();
            let durations: Vec<u32> = token_ids.iter().map(|&v| true_duration(v, s)).collect();
            let mut frames = Vec::with_capacity(durations.iter().sum::<u32>() as usize);
            for (&v, &dur) in token_ids.iter().zip(&durations) {
                let pattern = base_pattern(v, d);
                for _ in 0..dur {
                    let frame: Vec<f64> = pattern
                        .iter()
                        .zip(speaker_scale[s].iter().zip(&speaker_bias[s]))
                        .map(|(p, (sc, b))| {
                            p * sc + b + config.jitter * rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect();
                    frames.push(frame);
                }
            }
            utterances.push(Utterance {
                token_ids,
                speaker_id: s,
                durations,
                frames,
            });
        }
    }
    Ok(SyntheticCorpus {
        config: *config,
        speaker_scale,
        speaker_bias,
        utterances,
    })
}

impl SyntheticCorpus {
    /// Noise-free target frame for `(token, speaker)`.
    pub fn prototype(&self, token: usize, speaker: usize) -> Vec<f64> {
        base_pattern(token, self.config.channels)
            .iter()
            .zip(
                self.speaker_scale[speaker]
                    .iter()
                    .zip(&self.speaker_bias[speaker]),
            )
            .map(|(p, (sc, b))| p * sc + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            emb_dim: 16,
            hidden_dim: 64,
        }
    }
}

/// Prior encoder: token embedding plus a projected speaker embedding feed a
/// small MLP that emits the token-level mean with the same channel count as
/// the target frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorEncoder {
    pub config: EncoderConfig,
    pub token_emb: Vec<f64>,
    pub speaker_proj: Dense,
    pub hidden: Dense,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct PriorEncoderGrads {
    pub token_emb: Vec<f64>,
    pub speaker_proj: (Vec<f64>, Vec<f64>),
    pub hidden: (Vec<f64>, Vec<f64>),
    pub out: (Vec<f64>, Vec<f64>),
}

pub struct EncoderCache {
    token_id: usize,
    spk_emb: Vec<f64>,
    concat: Vec<f64>,
    h: Vec<f64>,
    pub mu: Vec<f64>,
}

impl PriorEncoder {
    pub fn init(
        config: EncoderConfig,
        speaker_dim: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let e = config.emb_dim;
        let bound = 1.0 / (e as f64).sqrt();
        let token_emb = (0..config.vocab * e)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let speaker_proj = Dense::init_uniform(speaker_dim, e, rng);
        let hidden = Dense::init_uniform(2 * e, config.hidden_dim, rng);
        // zero output head: the initial token-level mean is the zero vector
        let out = Dense::zeros(config.hidden_dim, channels);
        Self {
            config,
            token_emb,
            speaker_proj,
            hidden,
            out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.token_emb.len()
            + self.speaker_proj.param_count()
            + self.hidden.param_count()
            + self.out.param_count()
    }

    pub fn token_embedding(&self, token_id: usize) -> Result<&[f64]> {
        let e = self.config.emb_dim;
        if token_id >= self.config.vocab {
            return Err(Error::Lookup {
                what: "token id",
                index: token_id,
                len: self.config.vocab,
            });
        }
        Ok(&self.token_emb[token_id * e..(token_id + 1) * e])
    }

    pub fn forward_cached(&self, token_id: usize, spk_emb: &[f64]) -> Result<EncoderCache> {
        let emb = self.token_embedding(token_id)?.to_vec();
        let mut proj = vec![0.0; self.config.emb_dim];
        self.speaker_proj.forward_into(spk_emb, &mut proj);
        let mut concat = emb;
        concat.extend_from_slice(&proj);
        let mut h = vec![0.0; self.hidden.out_dim];
        self.hidden.forward_into(&concat, &mut h);
        tanh_inplace(&mut h);
        let mut mu = vec![0.0; self.out.out_dim];
        self.out.forward_into(&h, &mut mu);
        Ok(EncoderCache {
            token_id,
            spk_emb: spk_emb.to_vec(),
            concat,
            h,
            mu,
        })
    }

    /// Token-level means for a token sequence.
    pub fn encode_prior(&self, token_ids: &[usize], spk_emb: &[f64]) -> Result<Vec<Vec<f64>>> {
        token_ids
            .iter()
            .map(|&v| Ok(self.forward_cached(v, spk_emb)?.mu))
            .collect()
    }

    /// Backward through one token; accumulates parameter gradients and
    /// returns the gradient with respect to the speaker embedding.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_mu: &[f64],
        grads: &mut PriorEncoderGrads,
    ) -> Vec<f64> {
        let mut dh = vec![0.0; self.out.in_dim];
        self.out
            .backward(&cache.h, d_mu, &mut dh, &mut grads.out.0, &mut grads.out.1);
        tanh_backward(&cache.h, &mut dh);
        let mut dconcat = vec![0.0; self.hidden.in_dim];
        self.hidden.backward(
            &cache.concat,
            &dh,
            &mut dconcat,
            &mut grads.hidden.0,
            &mut grads.hidden.1,
        );
        let e = self.config.emb_dim;
        // token embedding rows accumulate the first half of the concat grad
        let row = &mut grads.token_emb[cache.token_id * e..(cache.token_id + 1) * e];
        for (g, dv) in row.iter_mut().zip(&dconcat[..e]) {
            *g += dv;
        }
        let mut d_spk = vec![0.0; self.speaker_proj.in_dim];
        self.speaker_proj.backward(
            &cache.spk_emb,
            &dconcat[e..],
            &mut d_spk,
            &mut grads.speaker_proj.0,
            &mut grads.speaker_proj.1,
        );
        d_spk
    }
}

impl PriorEncoderGrads {
    pub fn zeros(enc: &PriorEncoder) -> Self {
        Self {
            token_emb: vec![0.0; enc.token_emb.len()],
            speaker_proj: (
                vec![0.0; enc.speaker_proj.w.len()],
                vec![0.0; enc.speaker_proj.b.len()],
            ),
            hidden: (vec![0.0; enc.hidden.w.len()], vec![0.0; enc.hidden.b.len()]),
            out: (vec![0.0; enc.out.w.len()], vec![0.0; enc.out.b.len()]),
        }
    }

    pub fn reset(&mut self) {
        self.token_emb.iter_mut().for_each(|v| *v = 0.0);
        for (w, b) in [&mut self.speaker_proj, &mut self.hidden, &mut self.out] {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Duration predictor: a small MLP on the detached token embedding and the
/// speaker embedding, emitting one log-duration per token.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationPredictor {
    pub hidden: Dense,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct DurationPredictorGrads {
    pub hidden: (Vec<f64>, Vec<f64>),
    pub out: (Vec<f64>, Vec<f64>),
}

pub struct DurationCache {
    input: Vec<f64>,
    h: Vec<f64>,
    pub log_duration: f64,
}

impl DurationPredictor {
    pub fn init(
        emb_dim: usize,
        speaker_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Dense::init_uniform(emb_dim + speaker_dim, hidden_dim, rng),
            out: Dense::zeros(hidden_dim, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    pub fn forward_cached(&self, token_emb: &[f64], spk_emb: &[f64]) -> DurationCache {
        let mut input = token_emb.to_vec();
        input.extend_from_slice(spk_emb);
        let mut h = vec![0.0; self.hidden.out_dim];
        self.hidden.forward_into(&input, &mut h);
        tanh_inplace(&mut h);
        let mut y = vec![0.0; 1];
        self.out.forward_into(&h, &mut y);
        DurationCache {
            input,
            h,
            log_duration: y[0],
        }
    }

    /// Predicted frame count for one token.
    pub fn predict(&self, token_emb: &[f64], spk_emb: &[f64]) -> u32 {
        decode_duration(self.forward_cached(token_emb, spk_emb).log_duration)
    }

    /// Backward for one token. The token-representation branch is detached:
    /// only the gradient with respect to the speaker embedding is returned.
    pub fn backward(
        &self,
        cache: &DurationCache,
        d_y: f64,
        emb_dim: usize,
        grads: &mut DurationPredictorGrads,
    ) -> Vec<f64> {
        let mut dh = vec![0.0; self.out.in_dim];
        self.out
            .backward(&cache.h, &[d_y], &mut dh, &mut grads.out.0, &mut grads.out.1);
        tanh_backward(&cache.h, &mut dh);
        let mut dinput = vec![0.0; self.hidden.in_dim];
        self.hidden.backward(
            &cache.input,
            &dh,
            &mut dinput,
            &mut grads.hidden.0,
            &mut grads.hidden.1,
        );
        dinput[emb_dim..].to_vec()
    }
}

impl DurationPredictorGrads {
    pub fn zeros(dp: &DurationPredictor) -> Self {
        Self {
            hidden: (vec![0.0; dp.hidden.w.len()], vec![0.0; dp.hidden.b.len()]),
            out: (vec![0.0; dp.out.w.len()], vec![0.0; dp.out.b.len()]),
        }
    }

    pub fn reset(&mut self) {
        for (w, b) in [&mut self.hidden, &mut self.out] {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Repeats token-level means by their durations into frame-level means.
pub fn length_regulate(token_mu: &[Vec<f64>], durations: &[u32]) -> Result<Vec<Vec<f64>>> {
    if token_mu.len() != durations.len() {
        return Err(Error::Shape {
            what: "length regulation",
            expected: durations.len(),
            got: token_mu.len(),
        });
    }
    let mut frames = Vec::with_capacity(durations.iter().sum::<u32>() as usize);
    for (mu, &d) in token_mu.iter().zip(durations) {
        if d == 0 {
            return Err(Error::Data("length regulation needs durations >= 1".into()));
        }
        for _ in 0..d {
            frames.push(mu.clone());
        }
    }
    Ok(frames)
}

/// The full model bundle of the acoustic pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsModel {
    pub denoiser: DenoiserNet,
    pub encoder: PriorEncoder,
    pub duration: DurationPredictor,
    pub speakers: SpeakerTable,
}

#[derive(Debug)]
pub struct TtsGrads {
    pub denoiser: DenoiserGrads,
    pub encoder: PriorEncoderGrads,
    pub duration: DurationPredictorGrads,
    pub speakers: SpeakerTableGrads,
}

impl TtsGrads {
    pub fn zeros(model: &TtsModel) -> Self {
        Self {
            denoiser: DenoiserGrads::zeros(&model.denoiser),
            encoder: PriorEncoderGrads::zeros(&model.encoder),
            duration: DurationPredictorGrads::zeros(&model.duration),
            speakers: SpeakerTableGrads::zeros(&model.speakers),
        }
    }

    pub fn reset(&mut self) {
        self.denoiser.reset();
        self.encoder.reset();
        self.duration.reset();
        self.speakers.reset();
    }

    /// Same ordering as [`TtsModel::flatten_into`].
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.denoiser.flatten_into(out);
        out.extend_from_slice(&self.encoder.token_emb);
        for (w, b) in [
            &self.encoder.speaker_proj,
            &self.encoder.hidden,
            &self.encoder.out,
        ] {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        for (w, b) in [&self.duration.hidden, &self.duration.out] {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.speakers.emb);
    }
}

impl TtsModel {
    pub fn init(
        corpus_cfg: &CorpusConfig,
        net_cfg: DenoiserConfig,
        enc_cfg: EncoderConfig,
        dp_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if net_cfg.data_dim != corpus_cfg.channels {
            return Err(Error::Shape {
                what: "decoder channels",
                expected: corpus_cfg.channels,
                got: net_cfg.data_dim,
            });
        }
        if enc_cfg.vocab != corpus_cfg.vocab {
            return Err(Error::Shape {
                what: "encoder vocab",
                expected: corpus_cfg.vocab,
                got: enc_cfg.vocab,
            });
        }
        let denoiser = DenoiserNet::init(net_cfg, rng)?;
        let encoder = PriorEncoder::init(enc_cfg, net_cfg.speaker_dim, corpus_cfg.channels, rng);
        let duration =
            DurationPredictor::init(enc_cfg.emb_dim, net_cfg.speaker_dim, dp_hidden, rng);
        let speakers = SpeakerTable::init(corpus_cfg.speakers, net_cfg.speaker_dim, rng);
        Ok(Self {
            denoiser,
            encoder,
            duration,
            speakers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.denoiser.param_count()
            + self.encoder.param_count()
            + self.duration.param_count()
            + self.speakers.param_count()
    }

    /// Flat parameter order: denoiser, encoder (token table, speaker proj,
    /// hidden, out), duration predictor (hidden, out), speaker table.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.denoiser.flatten_into(out);
        out.extend_from_slice(&self.encoder.token_emb);
        for l in [
            &self.encoder.speaker_proj,
            &self.encoder.hidden,
            &self.encoder.out,
        ] {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        for l in [&self.duration.hidden, &self.duration.out] {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out.extend_from_slice(&self.speakers.emb);
    }

    pub fn unflatten_from(&mut self, src: &[f64]) -> Result<usize> {
        let mut off = self.denoiser.unflatten_from(src)?;
        fn take(dst: &mut [f64], src: &[f64], off: &mut usize) -> Result<()> {
            if *off + dst.len() > src.len() {
                return Err(Error::Shape {
                    what: "tts unflatten",
                    expected: *off + dst.len(),
                    got: src.len(),
                });
            }
            dst.copy_from_slice(&src[*off..*off + dst.len()]);
            *off += dst.len();
            Ok(())
        }
        take(&mut self.encoder.token_emb, src, &mut off)?;
        for l in [
            &mut self.encoder.speaker_proj,
            &mut self.encoder.hidden,
            &mut self.encoder.out,
        ] {
            take(&mut l.w, src, &mut off)?;
            take(&mut l.b, src, &mut off)?;
        }
        for l in [&mut self.duration.hidden, &mut self.duration.out] {
            take(&mut l.w, src, &mut off)?;
            take(&mut l.b, src, &mut off)?;
        }
        take(&mut self.speakers.emb, src, &mut off)?;
        Ok(off)
    }

    /// Full inference pipeline: predicted durations, frame-level means via
    /// length regulation, then one stochastic-sampler solve per frame.
    pub fn synthesize(
        &self,
        token_ids: &[usize],
        speaker_id: usize,
        params: &SamplerParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        if token_ids.is_empty() {
            return Err(Error::Data("synthesize needs at least one token".into()));
        }
        let spk = self.speakers.lookup(speaker_id)?.to_vec();
        let token_mu = self.encoder.encode_prior(token_ids, &spk)?;
        let durations: Vec<u32> = token_ids
            .iter()
            .map(|&v| {
                Ok(self
                    .duration
                    .predict(self.encoder.token_embedding(v)?, &spk))
            })
            .collect::<Result<_>>()?;
        let frame_mu = length_regulate(&token_mu, &durations)?;
        let mut frames = Vec::with_capacity(frame_mu.len());
        for mu in frame_mu {
            let cond = Conditioning {
                mu,
                speaker: spk.clone(),
            };
            frames.push(stochastic_heun_sample(&self.denoiser, &cond, params, rng)?);
        }
        Ok(frames)
    }
}

/// Per-term weights inside the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub duration: f64,
    pub prior: f64,
    pub dsm: f64,
    pub cdm: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            duration: 1.0,
            prior: 1.0,
            dsm: 1.0,
            cdm: cfg.lambda,
        }
    }
}

/// Loss parts and gradients for one batch of utterances under the combined
/// objective. Real durations drive length regulation; gradients flow from
/// the decoder's conditioning back into the encoder and speaker table, while
/// the duration predictor sees detached token representations.
#[allow(clippy::too_many_arguments)]
pub fn tts_losses_and_grads(
    model: &TtsModel,
    corpus: &SyntheticCorpus,
    batch_indices: &[usize],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
    grads: &mut TtsGrads,
) -> Result<LossParts> {
    let d = corpus.config.channels;
    let emb_dim = model.encoder.config.emb_dim;

    struct UttWork {
        speaker_id: usize,
        enc_caches: Vec<EncoderCache>,
        dur_caches: Vec<DurationCache>,
        frame_token: Vec<usize>,
        frame_offset: usize,
        d_mu_tokens: Vec<Vec<f64>>,
    }

    let mut works: Vec<UttWork> = Vec::with_capacity(batch_indices.len());
    let mut total_tokens = 0usize;
    let mut frame_batch: Vec<BatchElem> = Vec::new();

    for &ui in batch_indices {
        let utt = corpus.utterances.get(ui).ok_or(Error::Lookup {
            what: "utterance index",
            index: ui,
            len: corpus.utterances.len(),
        })?;
        let spk_emb = model.speakers.lookup(utt.speaker_id)?.to_vec();
        let enc_caches: Vec<EncoderCache> = utt
            .token_ids
            .iter()
            .map(|&v| model.encoder.forward_cached(v, &spk_emb))
            .collect::<Result<_>>()?;
        let dur_caches: Vec<DurationCache> = utt
            .token_ids
            .iter()
            .map(|&v| {
                Ok(model
                    .duration
                    .forward_cached(model.encoder.token_embedding(v)?, &spk_emb))
            })
            .collect::<Result<_>>()?;
        total_tokens += utt.token_ids.len();

        let frame_offset = frame_batch.len();
        let mut frame_token = Vec::new();
        for (ti, &dur) in utt.durations.iter().enumerate() {
            if dur == 0 {
                return Err(Error::Data("corpus durations must be >= 1".into()));
            }
            for _ in 0..dur {
                frame_token.push(ti);
            }
        }
        if frame_token.len() != utt.frames.len() {
            return Err(Error::Shape {
                what: "utterance frames vs durations",
                expected: frame_token.len(),
                got: utt.frames.len(),
            });
        }
        for (fi, frame) in utt.frames.iter().enumerate() {
            frame_batch.push(BatchElem {
                x0: frame.clone(),
                cond: Conditioning {
                    mu: enc_caches[frame_token[fi]].mu.clone(),
                    speaker: spk_emb.clone(),
                },
            });
        }
        let d_mu_tokens = vec![vec![0.0; d]; utt.token_ids.len()];
        works.push(UttWork {
            speaker_id: utt.speaker_id,
            enc_caches,
            dur_caches,
            frame_token,
            frame_offset,
            d_mu_tokens,
        });
    }
    let total_frames = frame_batch.len();
    if total_frames == 0 || total_tokens == 0 {
        return Err(Error::Data("batch has no frames".into()));
    }

    // ---- prior loss: MSE of frame-level mu against target frames ----
    let mut prior = 0.0;
    let prior_norm = (total_frames * d) as f64;
    for (wi, &ui) in works.iter_mut().zip(batch_indices) {
        let utt = &corpus.utterances[ui];
        for (fi, frame) in utt.frames.iter().enumerate() {
            let token = wi.frame_token[fi];
            for c in 0..d {
                let diff = wi.enc_caches[token].mu[c] - frame[c];
                prior += diff * diff;
                wi.d_mu_tokens[token][c] += 2.0 * diff / prior_norm * weights.prior;
            }
        }
    }
    prior /= prior_norm;

    // ---- duration loss on detached token representations ----
    let mut duration = 0.0;
    for (wi, &ui) in works.iter_mut().zip(batch_indices) {
        let utt = &corpus.utterances[ui];
        for (ti, &dur) in utt.durations.iter().enumerate() {
            let target = encode_duration(dur);
            let diff = wi.dur_caches[ti].log_duration - target;
            duration += diff * diff;
            let d_y = 2.0 * diff / total_tokens as f64 * weights.duration;
            let d_spk =
                model
                    .duration
                    .backward(&wi.dur_caches[ti], d_y, emb_dim, &mut grads.duration);
            grads
                .speakers
                .accumulate(&model.speakers, wi.speaker_id, &d_spk);
        }
    }
    duration /= total_tokens as f64;

    // ---- score-matching loss over all frames ----
    let dsm_draws = sample_dsm_draws(total_frames, d, cfg, schedule, rng);
    let (dsm, dsm_cond) = loss_dsm_grad(
        &model.denoiser,
        &frame_batch,
        &dsm_draws,
        schedule,
        weights.dsm,
        &mut grads.denoiser,
        true,
    )?;
    let dsm_cond = dsm_cond.expect("cond grads requested");

    // ---- consistency loss over all frames ----
    let (cdm, cdm_cond) = if weights.cdm > 0.0 {
        let draws = sample_cdm_draws(total_frames, d, cfg, schedule, rng);
        let (v, c) = loss_cdm_grad(
            &model.denoiser,
            &frame_batch,
            &draws,
            cfg,
            schedule,
            weights.cdm,
            &mut grads.denoiser,
            true,
        )?;
        (v, c)
    } else {
        (0.0, None)
    };

    // ---- route conditioning gradients back through length regulation ----
    let route = |wi: &mut UttWork, frame_grads: &[InputGrads], grads: &mut TtsGrads| {
        for (fi, ig) in frame_grads.iter().enumerate() {
            let token = wi.frame_token[fi];
            for (acc, g) in wi.d_mu_tokens[token].iter_mut().zip(&ig.mu) {
                *acc += g;
            }
            grads
                .speakers
                .accumulate(&model.speakers, wi.speaker_id, &ig.speaker);
        }
    };
    for wi in works.iter_mut() {
        let lo = wi.frame_offset;
        let hi = lo + wi.frame_token.len();
        let dsm_slice = dsm_cond[lo..hi].to_vec();
        route(wi, &dsm_slice, grads);
        if let Some(ref cdm_cond) = cdm_cond {
            let cdm_slice = cdm_cond[lo..hi].to_vec();
            route(wi, &cdm_slice, grads);
        }
    }

    // ---- encoder backward per token ----
    for wi in &works {
        for (cache, d_mu) in wi.enc_caches.iter().zip(&wi.d_mu_tokens) {
            let d_spk = model.encoder.backward(cache, d_mu, &mut grads.encoder);
            grads
                .speakers
                .accumulate(&model.speakers, wi.speaker_id, &d_spk);
        }
    }

    Ok(LossParts {
        duration,
        prior,
        dsm,
        cdm,
    })
}

/// Training state of the full pipeline.
#[derive(Debug, Clone)]
pub struct TtsTrainState {
    pub model: TtsModel,
    pub adam: Adam,
    pub step: usize,
}

#[derive(Debug)]
pub struct TtsRun {
    pub state: TtsTrainState,
    pub history: Vec<HistoryRow>,
    pub diverged_at: Option<usize>,
}

/// Joint training of encoder, duration predictor, speaker table, and decoder
/// under the combined objective. Deterministic given `cfg.seed`.
pub fn train_tts(
    corpus: &SyntheticCorpus,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    net_cfg: DenoiserConfig,
    enc_cfg: EncoderConfig,
) -> Result<TtsRun> {
    cfg.validate()?;
    let mut init_rng = stream_rng(cfg.seed, u64::MAX);
    let model = TtsModel::init(&corpus.config, net_cfg, enc_cfg, 64, &mut init_rng)?;
    let adam = Adam::new(model.param_count());
    let mut state = TtsTrainState {
        model,
        adam,
        step: 0,
    };
    let (history, diverged_at) = train_tts_steps(&mut state, corpus, schedule, cfg)?;
    Ok(TtsRun {
        state,
        history,
        diverged_at,
    })
}

/// Continues training to `cfg.n_steps`; step `i` consumes stream
/// `(cfg.seed, i)` so resumed runs replay the unbroken randomness.
pub fn train_tts_steps(
    state: &mut TtsTrainState,
    corpus: &SyntheticCorpus,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<HistoryRow>, Option<usize>)> {
    cfg.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let weights = LossWeights::from_config(cfg);
    let mut grads = TtsGrads::zeros(&state.model);
    let mut history = Vec::new();
    let mut flat_params = Vec::with_capacity(state.model.param_count());
    let mut flat_grads = Vec::with_capacity(state.model.param_count());

    while state.step < cfg.n_steps {
        let step = state.step;
        let started = Instant::now();
        let mut rng = stream_rng(cfg.seed, step as u64);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..corpus.utterances.len()))
            .collect();
        grads.reset();
        let parts = match tts_losses_and_grads(
            &state.model,
            corpus,
            &batch,
            cfg,
            schedule,
            &weights,
            &mut rng,
            &mut grads,
        ) {
            Ok(p) => p,
            Err(Error::NonFinite(_)) => return Ok((history, Some(step))),
            Err(e) => return Err(e),
        };
        let l_final = total_loss(&parts, cfg.lambda);
        if !l_final.is_finite() {
            return Ok((history, Some(step)));
        }

        flat_params.clear();
        flat_grads.clear();
        state.model.flatten_into(&mut flat_params);
        grads.flatten_into(&mut flat_grads);
        state.adam.update(
            &mut flat_params,
            &flat_grads,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )?;
        state.model.unflatten_from(&flat_params)?;
        state.step += 1;

        history.push(HistoryRow {
            step,
            l_duration: parts.duration,
            l_prior: parts.prior,
            l_dsm: parts.dsm,
            l_cdm: parts.cdm,
            l_final,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((history, None))
}

/// Pearson correlation over channels.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// For each speaker, synthesizes a fixed probe sequence and checks whether
/// the mean synthesized frame correlates best with that speaker's own
/// prototypes. Returns `(correct, total)`.
pub fn speaker_argmax_accuracy(
    model: &TtsModel,
    corpus: &SyntheticCorpus,
    params: &SamplerParams,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let cfg = &corpus.config;
    let probe_tokens: Vec<usize> = (0..cfg.vocab.min(8)).collect();
    let mut correct = 0;
    for s in 0..cfg.speakers {
        let frames = model.synthesize(&probe_tokens, s, params, rng)?;
        let mut mean_frame = vec![0.0; cfg.channels];
        for f in &frames {
            for (m, v) in mean_frame.iter_mut().zip(f) {
                *m += v / frames.len() as f64;
            }
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for cand in 0..cfg.speakers {
            let mut proto_mean = vec![0.0; cfg.channels];
            for &v in &probe_tokens {
                let p = corpus.prototype(v, cand);
                for (m, pv) in proto_mean.iter_mut().zip(&p) {
                    *m += pv / probe_tokens.len() as f64;
                }
            }
            let c = correlation(&mean_frame, &proto_mean);
            if c > best.0 {
                best = (c, cand);
            }
        }
        if best.1 == s {
            correct += 1;
        }
    }
    Ok((correct, cfg.speakers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    #[test]
    fn duration_formula_and_range() {
        assert_eq!(true_duration(3, 4), 4);
        for v in 0..32 {
            for s in 0..16 {
                let d = true_duration(v, s);
                assert!((2..=6).contains(&d));
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_consistent() {
        let cfg = CorpusConfig {
            utterances_per_speaker: 3,
            ..CorpusConfig::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        for utt in &a.utterances {
            let total: u32 = utt.durations.iter().sum();
            assert_eq!(total as usize, utt.frames.len());
            for (&v, &d) in utt.token_ids.iter().zip(&utt.durations) {
                assert_eq!(d, true_duration(v, utt.speaker_id));
            }
        }
    }

    #[test]
    fn zero_jitter_frames_equal_prototypes() {
        let cfg = CorpusConfig {
            jitter: 0.0,
            utterances_per_speaker: 2,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for utt in &corpus.utterances {
            let mut fi = 0;
            for (&v, &d) in utt.token_ids.iter().zip(&utt.durations) {
                let proto = corpus.prototype(v, utt.speaker_id);
                for _ in 0..d {
                    assert_eq!(utt.frames[fi], proto);
                    fi += 1;
                }
            }
        }
    }

    #[test]
    fn length_regulation_examples() {
        let mu = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let frames = length_regulate(&mu, &[2, 3, 1]).unwrap();
        assert_eq!(frames.len(), 6);
        assert_eq!(frames[0], vec![1.0, 2.0]);
        assert_eq!(frames[1], vec![1.0, 2.0]);
        assert_eq!(frames[5], vec![5.0, 6.0]);

        let id = length_regulate(&mu, &[1, 1, 1]).unwrap();
        assert_eq!(id, mu);

        assert!(length_regulate(&mu, &[2, 0, 1]).is_err());
        assert!(length_regulate(&mu, &[2, 1]).is_err());
    }

    #[test]
    fn encoder_zero_head_gives_zero_mu_and_shapes_hold() {
        let mut rng = seed_rng(3);
        let enc = PriorEncoder::init(EncoderConfig::default(), 16, 16, &mut rng);
        let spk = vec![0.2; 16];
        let mu = enc.encode_prior(&[0, 5, 15], &spk).unwrap();
        assert_eq!(mu.len(), 3);
        for m in &mu {
            assert_eq!(m.len(), 16);
            assert!(m.iter().all(|&v| v == 0.0));
        }
        assert!(enc.encode_prior(&[16], &spk).is_err());
    }

    fn tiny_setup() -> (SyntheticCorpus, TrainConfig, DenoiserConfig, EncoderConfig) {
        let corpus_cfg = CorpusConfig {
            vocab: 6,
            speakers: 3,
            channels: 4,
            utterances_per_speaker: 3,
            min_tokens: 2,
            max_tokens: 4,
            jitter: 0.02,
            seed: 9,
        };
        let corpus = generate_corpus(&corpus_cfg).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            n_steps: 8,
            k_rollout: 2,
            lr: 3e-4,
            seed: 4,
            ..TrainConfig::default()
        };
        let net_cfg = DenoiserConfig {
            data_dim: 4,
            hidden_dim: 16,
            n_hidden: 2,
            fourier_dim: 8,
            speaker_dim: 6,
        };
        let enc_cfg = EncoderConfig {
            vocab: 6,
            emb_dim: 8,
            hidden_dim: 16,
        };
        (corpus, cfg, net_cfg, enc_cfg)
    }

    #[test]
    fn duration_loss_does_not_touch_token_embeddings() {
        let (corpus, cfg, net_cfg, enc_cfg) = tiny_setup();
        let mut rng = seed_rng(1);
        let model = TtsModel::init(&corpus.config, net_cfg, enc_cfg, 16, &mut rng).unwrap();
        let mut grads = TtsGrads::zeros(&model);
        let weights = LossWeights {
            duration: 1.0,
            prior: 0.0,
            dsm: 0.0,
            cdm: 0.0,
        };
        // dsm always runs (weight scales its gradient to zero); token table
        // gradients must come out exactly zero when only duration is active
        let mut step_rng = seed_rng(2);
        tts_losses_and_grads(
            &model,
            &corpus,
            &[0, 1, 2],
            &cfg,
            &NoiseSchedule::default(),
            &weights,
            &mut step_rng,
            &mut grads,
        )
        .unwrap();
        assert!(grads.encoder.token_emb.iter().all(|&g| g == 0.0));
        // but the duration predictor itself received gradients (its zero
        // output head blocks deeper layers on the first step, so check the
        // head itself)
        let dp_norm: f64 = grads
            .duration
            .out
            .1
            .iter()
            .chain(&grads.duration.out.0)
            .map(|g| g * g)
            .sum();
        assert!(dp_norm > 0.0);
    }

    #[test]
    fn joint_losses_fill_all_parameter_groups() {
        let (corpus, cfg, net_cfg, enc_cfg) = tiny_setup();
        let mut rng = seed_rng(5);
        // randomize the output heads: freshly initialized heads are zero and
        // block gradient flow into deeper layers on the very first step
        let mut model = TtsModel::init(&corpus.config, net_cfg, enc_cfg, 16, &mut rng).unwrap();
        model.denoiser = DenoiserNet::init_random(net_cfg, &mut rng).unwrap();
        model.encoder.out = Dense::init_uniform(enc_cfg.hidden_dim, 4, &mut rng);
        model.duration.out = Dense::init_uniform(16, 1, &mut rng);
        let mut grads = TtsGrads::zeros(&model);
        let weights = LossWeights {
            duration: 1.0,
            prior: 1.0,
            dsm: 1.0,
            cdm: 2.0,
        };
        let mut step_rng = seed_rng(6);
        let parts = tts_losses_and_grads(
            &model,
            &corpus,
            &[0, 3],
            &cfg,
            &NoiseSchedule::default(),
            &weights,
            &mut step_rng,
            &mut grads,
        )
        .unwrap();
        assert!(parts.duration > 0.0 && parts.prior > 0.0 && parts.dsm > 0.0);
        let sum_sq = |v: &[f64]| v.iter().map(|g| g * g).sum::<f64>();
        assert!(sum_sq(&grads.encoder.token_emb) > 0.0);
        assert!(sum_sq(&grads.speakers.emb) > 0.0);
        assert!(sum_sq(&grads.duration.hidden.0) > 0.0);
        let mut dn = Vec::new();
        grads.denoiser.flatten_into(&mut dn);
        assert!(sum_sq(&dn) > 0.0);
    }

    #[test]
    fn tts_training_runs_and_is_deterministic() {
        let (corpus, cfg, net_cfg, enc_cfg) = tiny_setup();
        let sched = NoiseSchedule::default();
        let a = train_tts(&corpus, &sched, &cfg, net_cfg, enc_cfg).unwrap();
        let b = train_tts(&corpus, &sched, &cfg, net_cfg, enc_cfg).unwrap();
        assert!(a.diverged_at.is_none());
        assert_eq!(a.history.len(), 8);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.l_final.to_bits(), y.l_final.to_bits());
        }
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        a.state.model.flatten_into(&mut pa);
        b.state.model.flatten_into(&mut pb);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn synthesis_row_count_matches_predicted_durations() {
        let (corpus, cfg, net_cfg, enc_cfg) = tiny_setup();
        let sched = NoiseSchedule::default();
        let run = train_tts(&corpus, &sched, &cfg, net_cfg, enc_cfg).unwrap();
        let model = &run.state.model;
        let params = SamplerParams {
            n_steps: 4,
            ..SamplerParams::default()
        };
        let mut rng = seed_rng(11);
        let tokens = [0usize, 2, 5];
        let spk = model.speakers.lookup(1).unwrap();
        let want: u32 = tokens
            .iter()
            .map(|&v| {
                model
                    .duration
                    .predict(model.encoder.token_embedding(v).unwrap(), spk)
            })
            .sum();
        let frames = model.synthesize(&tokens, 1, &params, &mut rng).unwrap();
        assert_eq!(frames.len(), want as usize);
        assert!(frames.iter().all(|f| f.len() == 4));

        // determinism
        let a = model
            .synthesize(&tokens, 1, &params, &mut seed_rng(7))
            .unwrap();
        let b = model
            .synthesize(&tokens, 1, &params, &mut seed_rng(7))
            .unwrap();
        assert_eq!(a, b);

        // errors
        assert!(model.synthesize(&[], 1, &params, &mut rng).is_err());
        assert!(model.synthesize(&[0], 99, &params, &mut rng).is_err());
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let (corpus, _cfg, net_cfg, enc_cfg) = tiny_setup();
        let mut rng = seed_rng(13);
        let model = TtsModel::init(&corpus.config, net_cfg, enc_cfg, 16, &mut rng).unwrap();
        let mut flat = Vec::new();
        model.flatten_into(&mut flat);
        assert_eq!(flat.len(), model.param_count());
        let mut other = TtsModel::init(&corpus.config, net_cfg, enc_cfg, 16, &mut seed_rng(77))
            .unwrap();
        let used = other.unflatten_from(&flat).unwrap();
        assert_eq!(used, flat.len());
        assert_eq!(model, other);
    }

    #[test]
    fn corpus_serde_round_trip() {
        let cfg = CorpusConfig {
            vocab: 4,
            speakers: 2,
            channels: 3,
            utterances_per_speaker: 2,
            min_tokens: 2,
            max_tokens: 3,
            jitter: 0.01,
            seed: 1,
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let json = serde_json::to_string(&corpus).unwrap();
        let back: SyntheticCorpus = serde_json::from_str(&json).unwrap();
        assert_eq!(corpus, back);
    }
}
