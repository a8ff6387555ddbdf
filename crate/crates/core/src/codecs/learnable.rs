//! A small learnable encoder/decoder codec trained through a distortion layer.
//!
//! The encoder writes `E(I, wm) = I + ε·φ(I, wm)` with `φ` bounded by `tanh`.
//! The message is mapped by a linear layer onto an `H/8 × W/8` grid, upsampled
//! to full resolution and concatenated with image features. The decoder
//! downsamples three times by stride-2 convolutions and reads the payload from
//! the resulting grid with a linear layer.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::distortion::{gaussian_noise_image, DistortionLayer};
use super::{CodecDescriptor, WatermarkCodec};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::bit_accuracy;
use crate::nn::{
    bce_with_logits, concat, leaky_relu, leaky_relu_backward, split, tanh, tanh_backward, upsample_nearest,
    upsample_nearest_backward, AdamW, Conv2d, Linear, Tensor,
};
use crate::payload::WatermarkPayload;
use crate::rng::{stream, RandomSeedContext};

const MAGIC: &[u8; 8] = b"LMKCODEC";
/// Version of the serialized codec state.
pub const STATE_FORMAT_VERSION: u32 = 1;
/// Spatial reduction between the image and the message grid.
const GRID_FACTOR: usize = 8;
/// Negative slope of the hidden activations; keeps units from dying early in training.
const LEAK: f64 = 0.05;
/// Minimum training corpus size.
pub const MIN_TRAINING_IMAGES: usize = 200;
/// Held-out clean-path accuracy required for convergence.
pub const CONVERGED_CLEAN_ACCURACY: f64 = 0.99;
/// Held-out noisy-path accuracy required for convergence.
pub const CONVERGED_DISTORTED_ACCURACY: f64 = 0.95;
/// Noise level of the held-out distorted-path evaluation.
pub const EVAL_NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub payload_length: usize,
    pub hidden_channels: usize,
    /// Residual scale `ε` of the encoder.
    pub strength: f64,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub image_loss_weight: f64,
    /// Fraction of the corpus held out for evaluation.
    pub holdout_fraction: f64,
    pub distortion: DistortionLayer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            payload_length: 30,
            hidden_channels: 16,
            strength: 0.02,
            max_epochs: 40,
            learning_rate: 2e-3,
            batch_size: 4,
            image_loss_weight: 0.5,
            holdout_fraction: 0.1,
            distortion: DistortionLayer::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(16..=64).contains(&self.payload_length) {
            return Err(Error::Parameter(format!(
                "payload length {} outside 16..=64",
                self.payload_length
            )));
        }
        if self.hidden_channels == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("channels and batch size must be positive".into()));
        }
        if !(self.strength > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("strength and learning rate must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::Parameter("holdout fraction must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub epoch: usize,
    pub loss: f64,
    pub clean_accuracy: f64,
    pub distorted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Network {
    msg: Linear,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    e_out: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
    d4: Conv2d,
    d5: Conv2d,
    d_lin: Linear,
}

struct EncoderCache {
    x: Tensor,
    a1: Tensor,
    h1: Tensor,
    a2: Tensor,
    h2: Tensor,
    cat: Tensor,
    a3: Tensor,
    h3: Tensor,
    r: Tensor,
    signs: Vec<f64>,
}

struct DecoderCache {
    y: Tensor,
    a: [Tensor; 4],
    h: [Tensor; 4],
    a5: Tensor,
}

impl Network {
    fn new(n: usize, c: usize, grid: (usize, usize), ctx: RandomSeedContext) -> Self {
        let mut rng = ctx.rng();
        let cells = grid.0 * grid.1;
        Self {
            msg: Linear::new(n, cells, &mut rng),
            e1: Conv2d::he(3, c, 3, 1, 1, &mut rng),
            e2: Conv2d::he(c, c, 3, 1, 1, &mut rng),
            e3: Conv2d::he(c + 4, c, 3, 1, 1, &mut rng),
            e_out: Conv2d::he(c, 3, 1, 1, 0, &mut rng),
            d1: Conv2d::he(3, c, 3, 1, 1, &mut rng),
            d2: Conv2d::he(c, c, 3, 2, 1, &mut rng),
            d3: Conv2d::he(c, c, 3, 2, 1, &mut rng),
            d4: Conv2d::he(c, c, 3, 2, 1, &mut rng),
            d5: Conv2d::he(c, 1, 3, 1, 1, &mut rng),
            d_lin: Linear::new(cells, n, &mut rng),
        }
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in z.slices_mut() {
            p.fill(0.0);
        }
        z
    }

    fn convs(&self) -> [&Conv2d; 9] {
        [&self.e1, &self.e2, &self.e3, &self.e_out, &self.d1, &self.d2, &self.d3, &self.d4, &self.d5]
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.msg.weight, &self.msg.bias];
        for c in self.convs() {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.d_lin.weight);
        out.push(&self.d_lin.bias);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.msg.weight, &mut self.msg.bias];
        for c in [
            &mut self.e1,
            &mut self.e2,
            &mut self.e3,
            &mut self.e_out,
            &mut self.d1,
            &mut self.d2,
            &mut self.d3,
            &mut self.d4,
            &mut self.d5,
        ] {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.d_lin.weight);
        out.push(&mut self.d_lin.bias);
        out
    }

    /// Returns the unclamped encoder output and the cache for backward.
    fn encode(&self, x: &Tensor, signs: &[f64], strength: f64) -> (Tensor, EncoderCache) {
        let a1 = self.e1.forward(x);
        let h1 = leaky_relu(&a1, LEAK);
        let a2 = self.e2.forward(&h1);
        let h2 = leaky_relu(&a2, LEAK);
        let m = Tensor::from_vec(1, x.h / GRID_FACTOR, x.w / GRID_FACTOR, self.msg.forward(signs));
        let mu = upsample_nearest(&m, GRID_FACTOR);
        let cat = concat(&[&h2, &mu, x]);
        let a3 = self.e3.forward(&cat);
        let h3 = leaky_relu(&a3, LEAK);
        let r = tanh(&self.e_out.forward(&h3));
        let mut out = x.clone();
        for (o, v) in out.data.iter_mut().zip(&r.data) {
            *o += strength * v;
        }
        let cache = EncoderCache {
            x: x.clone(),
            a1,
            h1,
            a2,
            h2,
            cat,
            a3,
            h3,
            r,
            signs: signs.to_vec(),
        };
        (out, cache)
    }

    /// Accumulates encoder parameter gradients given `∂L/∂out`.
    fn encode_backward(&self, cache: &EncoderCache, grad_out: &Tensor, strength: f64, g: &mut Network) {
        let mut g_r = grad_out.clone();
        g_r.data.iter_mut().for_each(|v| *v *= strength);
        let g_a4 = tanh_backward(&cache.r, &g_r);
        self.e_out.backward_params(&cache.h3, &g_a4, &mut g.e_out.weight, &mut g.e_out.bias);
        let g_h3 = self.e_out.backward_input(cache.h3.shape(), &g_a4);
        let g_a3 = leaky_relu_backward(&cache.a3, &g_h3, LEAK);
        self.e3.backward_params(&cache.cat, &g_a3, &mut g.e3.weight, &mut g.e3.bias);
        let g_cat = self.e3.backward_input(cache.cat.shape(), &g_a3);
        let parts = split(&g_cat, &[cache.h2.c, 1, 3]);
        let g_m = upsample_nearest_backward(&parts[1], GRID_FACTOR);
        self.msg.backward(&cache.signs, &g_m.data, &mut g.msg.weight, &mut g.msg.bias);
        let g_a2 = leaky_relu_backward(&cache.a2, &parts[0], LEAK);
        self.e2.backward_params(&cache.h1, &g_a2, &mut g.e2.weight, &mut g.e2.bias);
        let g_h1 = self.e2.backward_input(cache.h1.shape(), &g_a2);
        let g_a1 = leaky_relu_backward(&cache.a1, &g_h1, LEAK);
        self.e1.backward_params(&cache.x, &g_a1, &mut g.e1.weight, &mut g.e1.bias);
    }

    fn decode(&self, y: &Tensor) -> (Vec<f64>, DecoderCache) {
        let mut a: Vec<Tensor> = Vec::with_capacity(4);
        let mut h: Vec<Tensor> = Vec::with_capacity(4);
        let mut cur = y.clone();
        for conv in [&self.d1, &self.d2, &self.d3, &self.d4] {
            let pre = conv.forward(&cur);
            cur = leaky_relu(&pre, LEAK);
            a.push(pre);
            h.push(cur.clone());
        }
        let a5 = self.d5.forward(&cur);
        let logits = self.d_lin.forward(&a5.data);
        let a: [Tensor; 4] = a.try_into().expect("four layers");
        let h: [Tensor; 4] = h.try_into().expect("four layers");
        (logits, DecoderCache { y: y.clone(), a, h, a5 })
    }

    /// Accumulates decoder gradients and returns `∂L/∂y`.
    fn decode_backward(&self, cache: &DecoderCache, grad_logits: &[f64], g: &mut Network) -> Tensor {
        let g_a5 = self.d_lin.backward(&cache.a5.data, grad_logits, &mut g.d_lin.weight, &mut g.d_lin.bias);
        let g_a5 = Tensor::from_vec(1, cache.a5.h, cache.a5.w, g_a5);
        self.d5.backward_params(&cache.h[3], &g_a5, &mut g.d5.weight, &mut g.d5.bias);
        let mut g_h = self.d5.backward_input(cache.h[3].shape(), &g_a5);
        let convs = [&self.d1, &self.d2, &self.d3, &self.d4];
        let grads = [&mut g.d1, &mut g.d2, &mut g.d3, &mut g.d4];
        for l in (0..4).rev() {
            let g_a = leaky_relu_backward(&cache.a[l], &g_h, LEAK);
            let input = if l == 0 { &cache.y } else { &cache.h[l - 1] };
            convs[l].backward_params(input, &g_a, &mut grads[l].weight, &mut grads[l].bias);
            g_h = convs[l].backward_input(input.shape(), &g_a);
        }
        g_h
    }
}

/// Complete persisted state of a learnable codec, including optimizer moments
/// so that training can resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableCodecState {
    pub format_version: u32,
    pub descriptor: CodecDescriptor,
    pub image_size: (usize, usize),
    pub config: TrainingConfig,
    pub log: Vec<TrainingLogEntry>,
    pub converged: bool,
    network: Network,
    optimizer: AdamW,
}

impl LearnableCodecState {
    /// Freshly initialised, untrained state for `image_size` inputs.
    pub fn initialize(config: &TrainingConfig, image_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let (h, w) = image_size;
        if h % GRID_FACTOR != 0 || w % GRID_FACTOR != 0 || h < 32 || w < 32 {
            return Err(Error::Parameter(format!(
                "learnable codec needs sides that are multiples of {GRID_FACTOR} and at least 32, got {h}x{w}"
            )));
        }
        let grid = (h / GRID_FACTOR, w / GRID_FACTOR);
        let ctx = RandomSeedContext::new(config.seed, stream::TRAINING);
        Ok(Self {
            format_version: STATE_FORMAT_VERSION,
            descriptor: CodecDescriptor::new("learnable", config.payload_length, config.strength, 0.6),
            image_size,
            config: config.clone(),
            log: Vec::new(),
            converged: false,
            network: Network::new(config.payload_length, config.hidden_channels, grid, ctx),
            optimizer: AdamW::new(config.learning_rate, 0.0),
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.log.len()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.network.slices().concat()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let body = serde_json::to_vec(self).map_err(|e| Error::State(e.to_string()))?;
        let mut bytes = Vec::with_capacity(body.len() + 44);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&STATE_FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&Sha256::digest(&body));
        bytes.extend_from_slice(&body);
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err(Error::State("not a codec state file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != STATE_FORMAT_VERSION {
            return Err(Error::State(format!("unsupported codec state version {version}")));
        }
        let body = &bytes[44..];
        if Sha256::digest(body).as_slice() != &bytes[12..44] {
            return Err(Error::State("codec state checksum mismatch".into()));
        }
        serde_json::from_slice(body).map_err(|e| Error::State(e.to_string()))
    }
}

fn to_tensor(image: &ImageBuffer) -> Tensor {
    Tensor::from_vec(image.channels(), image.height(), image.width(), image.to_chw())
}

fn from_tensor(t: &Tensor) -> Result<ImageBuffer> {
    ImageBuffer::from_chw(t.h, t.w, t.c, &t.data)
}

/// Trains a codec from scratch. See [`resume_training`].
pub fn train_learnable_codec(
    corpus: &[ImageBuffer],
    config: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<LearnableCodecState> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Parameter("empty training corpus".into()))?;
    let state = LearnableCodecState::initialize(config, (first.height(), first.width()))?;
    resume_training(state, corpus, checkpoint)
}

/// Continues training until convergence or the epoch cap. Each epoch draws its
/// randomness from `seed ⊕ epoch`, so an interrupted run resumed from a
/// checkpoint reproduces an uninterrupted one exactly.
pub fn resume_training(
    mut state: LearnableCodecState,
    corpus: &[ImageBuffer],
    checkpoint: Option<&Path>,
) -> Result<LearnableCodecState> {
    let config = state.config.clone();
    if corpus.len() < MIN_TRAINING_IMAGES {
        return Err(Error::Parameter(format!(
            "training needs at least {MIN_TRAINING_IMAGES} images, got {}",
            corpus.len()
        )));
    }
    for img in corpus {
        if (img.height(), img.width()) != state.image_size || img.channels() != 3 {
            return Err(Error::ShapeMismatch {
                left: (state.image_size.0, state.image_size.1, 3),
                right: img.shape(),
            });
        }
    }
    let holdout = ((corpus.len() as f64) * config.holdout_fraction).ceil() as usize;
    let (train, held) = corpus.split_at(corpus.len() - holdout);
    let base = RandomSeedContext::new(config.seed, stream::TRAINING);

    while !state.converged && state.epochs_completed() < config.max_epochs {
        let epoch = state.epochs_completed();
        let mut rng = base.for_item(epoch as u64 + 1).rng();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = state.network.zeroed();
            for &i in batch {
                let bits: Vec<bool> = (0..config.payload_length).map(|_| rand::Rng::random(&mut rng)).collect();
                let payload = WatermarkPayload::new(bits);
                let x = to_tensor(&train[i]);
                let (out, enc) = state.network.encode(&x, &payload.signs(), config.strength);
                let (noisy, applied) = config.distortion.forward(&out, &mut rng);
                let (logits, dec) = state.network.decode(&noisy);
                let targets: Vec<f64> = payload.bits().iter().map(|&b| f64::from(u8::from(b))).collect();
                let (bce, g_logits) = bce_with_logits(&logits, &targets);
                let n_px = out.data.len() as f64;
                let mse = out.data.iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n_px;
                let loss = bce + config.image_loss_weight * mse;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: epoch });
                }
                total_loss += loss;
                let g_noisy = state.network.decode_backward(&dec, &g_logits, &mut grads);
                let mut g_out = DistortionLayer::backward(&applied, &g_noisy);
                for ((g, a), b) in g_out.data.iter_mut().zip(&out.data).zip(&x.data) {
                    *g += config.image_loss_weight * 2.0 * (a - b) / n_px;
                }
                state.network.encode_backward(&enc, &g_out, config.strength, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut gslices = grads.slices_mut();
            for g in gslices.iter_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            let gs: Vec<&[f64]> = gslices.iter().map(|g| &**g).collect();
            state.optimizer.step(&mut state.network.slices_mut(), &gs);
        }
        let (clean, distorted) = evaluate_holdout(&state, held)?;
        state.log.push(TrainingLogEntry {
            epoch,
            loss: total_loss / train.len() as f64,
            clean_accuracy: clean,
            distorted_accuracy: distorted,
        });
        state.converged = clean >= CONVERGED_CLEAN_ACCURACY && distorted >= CONVERGED_DISTORTED_ACCURACY;
        if let Some(path) = checkpoint {
            state.save(path)?;
        }
    }
    Ok(state)
}

/// Held-out (clean, noisy σ=0.02) bit accuracies on 8-bit quantised embeddings.
pub fn evaluate_holdout(state: &LearnableCodecState, held: &[ImageBuffer]) -> Result<(f64, f64)> {
    let base = RandomSeedContext::new(state.config.seed ^ 0x5eed, stream::PAYLOAD);
    let (mut clean, mut noisy) = (0.0, 0.0);
    for (i, img) in held.iter().enumerate() {
        let payload = WatermarkPayload::random(state.config.payload_length, base.for_item(i as u64));
        let wm = embed_raw(state, img, &payload, state.config.strength)?.quantize_8bit();
        clean += bit_accuracy(&payload, &extract_raw(state, &wm)?)?;
        let distorted = gaussian_noise_image(&wm, EVAL_NOISE_SIGMA, base.for_item(i as u64).with_stream(stream::NOISE))?;
        noisy += bit_accuracy(&payload, &extract_raw(state, &distorted)?)?;
    }
    let n = held.len().max(1) as f64;
    Ok((clean / n, noisy / n))
}

fn check_image(state: &LearnableCodecState, image: &ImageBuffer) -> Result<()> {
    if (image.height(), image.width()) != state.image_size || image.channels() != 3 {
        return Err(Error::ShapeMismatch {
            left: (state.image_size.0, state.image_size.1, 3),
            right: image.shape(),
        });
    }
    Ok(())
}

fn embed_raw(
    state: &LearnableCodecState,
    image: &ImageBuffer,
    payload: &WatermarkPayload,
    strength: f64,
) -> Result<ImageBuffer> {
    check_image(state, image)?;
    if payload.len() != state.descriptor.payload_length {
        return Err(Error::LengthMismatch(payload.len(), state.descriptor.payload_length));
    }
    let (out, _) = state.network.encode(&to_tensor(image), &payload.signs(), strength);
    from_tensor(&out)
}

fn extract_raw(state: &LearnableCodecState, image: &ImageBuffer) -> Result<WatermarkPayload> {
    check_image(state, image)?;
    let (logits, _) = state.network.decode(&to_tensor(image));
    Ok(WatermarkPayload::new(logits.iter().map(|&z| z > 0.0).collect()))
}

/// A converged learnable codec. Construction refuses untrained states.
#[derive(Debug, Clone)]
pub struct LearnableCodec {
    state: LearnableCodecState,
}

impl LearnableCodec {
    pub fn new(state: LearnableCodecState) -> Result<Self> {
        if !state.converged {
            let last = state
                .log
                .last()
                .map(|e| format!("clean {:.3}, distorted {:.3}", e.clean_accuracy, e.distorted_accuracy))
                .unwrap_or_else(|| "untrained".into());
            return Err(Error::NotConverged(last));
        }
        Ok(Self { state })
    }

    pub fn state(&self) -> &LearnableCodecState {
        &self.state
    }
}

impl WatermarkCodec for LearnableCodec {
    fn descriptor(&self) -> &CodecDescriptor {
        &self.state.descriptor
    }

    fn embed_with_strength(&self, image: &ImageBuffer, payload: &WatermarkPayload, strength: f64) -> Result<ImageBuffer> {
        if !(strength >= 0.0) {
            return Err(Error::Parameter(format!("strength must be non-negative, got {strength}")));
        }
        embed_raw(&self.state, image, payload, strength)
    }

    /// Hard decisions at probability 0.5, i.e. logit sign.
    fn extract(&self, image: &ImageBuffer) -> Result<WatermarkPayload> {
        extract_raw(&self.state, image)
    }
}
