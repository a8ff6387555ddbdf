//! DenseNet-shaped convolutional feature extractor with an input gradient.

use std::env;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, LUMA, MIN_ATTACK_SIDE};
use crate::nn::{
    channel_affine, channel_affine_backward, concat, max_pool, max_pool_backward, relu, relu_backward, leaky_relu, leaky_relu_backward, split,
    Conv2d, Tensor,
};
use crate::rng::{stream, RandomSeedContext};
use crate::synth;

use super::{FeatureStack, LayerTag};

/// Environment variable naming an extractor weights file.
pub const WEIGHTS_ENV: &str = "LEAKMARK_EXTRACTOR_WEIGHTS";
const MAGIC: &[u8; 8] = b"LMKFEATX";
/// Version of the serialized weights format.
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const STEM_CHANNELS: usize = 32;
/// Negative-side slope of the stem activation.
const STEM_LEAK: f64 = 0.1;
const GROWTH: usize = 12;
const DENSE_LAYERS: usize = 4;
const STEM_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenseLayer {
    /// Folded batch-norm scale and shift applied before the ReLU.
    scale: Vec<f64>,
    shift: Vec<f64>,
    conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorWeights {
    pub format_version: u32,
    pub name: String,
    stem: Conv2d,
    layers: Vec<DenseLayer>,
}

/// Intermediate activations kept for [`Extractor::backward`].
pub struct ForwardCache {
    input_shape: (usize, usize, usize),
    stem_pre: Tensor,
    pool_idx: Vec<usize>,
    stem_out_shape: (usize, usize, usize),
    bn_pre: Vec<Tensor>,
    bn_act: Vec<Tensor>,
    depth: usize,
}

/// Convolutional feature extractor `F(·)`.
///
/// Stem: 7×7/2 convolution to 32 channels, leaky ReLU, 3×3/2 max pool. Then
/// one dense block of four BN-ReLU-conv3×3 layers with growth 12, each
/// appending its output to the running concatenation (32 → 80 channels at
/// `H/4`).
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    weights: ExtractorWeights,
}

/// Oriented Gabor kernel on a `k×k` grid, zero-mean, unit L2 norm.
fn gabor(k: usize, theta: f64, wavelength: f64, phase: f64, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let mut out = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let (dx, dy) = (x as f64 - r, y as f64 - r);
            let xr = dx * theta.cos() + dy * theta.sin();
            let yr = -dx * theta.sin() + dy * theta.cos();
            let env = (-(xr * xr + 0.36 * yr * yr) / (2.0 * sigma * sigma)).exp();
            out.push(env * (2.0 * PI * xr / wavelength + phase).cos());
        }
    }
    normalise(out)
}

fn gaussian(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    (0..k * k)
        .map(|i| {
            let (dx, dy) = ((i % k) as f64 - r, (i / k) as f64 - r);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

fn normalise(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Analytic stem bank: sixteen luminance Gabor filters (8 orientations × 2
/// phases), four finer Gabor filters, an on/off centre-surround pair, four
/// signed luminance low-pass blobs and six colour-opponent blobs.
fn stem_bank() -> Conv2d {
    let k = STEM_KERNEL;
    let mut spatial: Vec<(Vec<f64>, [f64; 3])> = Vec::new();
    let luma = [LUMA[0], LUMA[1], LUMA[2]];
    for o in 0..8 {
        let theta = o as f64 * PI / 8.0;
        for &phase in &[0.0, PI / 2.0] {
            spatial.push((gabor(k, theta, 4.0, phase, 1.6), luma));
        }
    }
    for o in 0..4 {
        spatial.push((gabor(k, o as f64 * PI / 4.0, 2.5, 0.0, 1.0), luma));
    }
    let dog = normalise(
        gaussian(k, 0.8)
            .iter()
            .zip(gaussian(k, 2.0))
            .map(|(a, b)| a / 4.02 - b / 25.13)
            .collect(),
    );
    spatial.push((dog.clone(), luma));
    spatial.push((dog.iter().map(|v| -v).collect(), luma));
    let blob = |sigma: f64| -> Vec<f64> {
        let g = gaussian(k, sigma);
        let s = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.iter().map(|v| v / s).collect()
    };
    for &sigma in &[2.0, 3.0] {
        spatial.push((blob(sigma), luma));
        spatial.push((blob(sigma).iter().map(|v| -v).collect(), luma));
    }
    for &sigma in &[1.5, 2.5] {
        spatial.push((blob(sigma), [1.0, -1.0, 0.0]));
        spatial.push((blob(sigma), [-0.5, -0.5, 1.0]));
    }
    spatial.push((blob(2.0), [-1.0, 1.0, 0.0]));
    spatial.push((blob(2.0), [0.5, 0.5, -1.0]));
    assert_eq!(spatial.len(), STEM_CHANNELS);

    let mut conv = Conv2d::zeros(3, STEM_CHANNELS, k, 2, 3);
    for (o, (kernel, colour)) in spatial.iter().enumerate() {
        for c in 0..3 {
            for (i, v) in kernel.iter().enumerate() {
                conv.weight[o * 3 * k * k + c * k * k + i] = v * colour[c];
            }
        }
    }
    conv
}

impl ExtractorWeights {
    /// Deterministic built-in weights: analytic stem, seeded He-initialised
    /// dense layers, batch-norm statistics fitted on synthetic images.
    pub fn builtin() -> Self {
        let mut rng = RandomSeedContext::new(0x1ea4, stream::EXTRACTOR).rng();
        let mut layers = Vec::with_capacity(DENSE_LAYERS);
        for l in 0..DENSE_LAYERS {
            let in_c = STEM_CHANNELS + l * GROWTH;
            layers.push(DenseLayer {
                scale: vec![1.0; in_c],
                shift: vec![0.0; in_c],
                conv: Conv2d::he(in_c, GROWTH, 3, 1, 1, &mut rng),
            });
        }
        let mut weights = Self {
            format_version: WEIGHTS_FORMAT_VERSION,
            name: "builtin-densenet-lite".into(),
            stem: stem_bank(),
            layers,
        };
        weights.fit_batch_norm(&synth::corpus(8, 64, 0xca1));
        weights
    }

    /// Sets each layer's folded batch norm to standardise its input over the
    /// calibration images, layer by layer.
    fn fit_batch_norm(&mut self, calibration: &[ImageBuffer]) {
        for l in 0..self.layers.len() {
            let in_c = self.layers[l].scale.len();
            let (mut sum, mut sq, mut count) = (vec![0.0; in_c], vec![0.0; in_c], 0.0);
            for img in calibration {
                let ex = Extractor { weights: self.clone() };
                let (stack, _) = ex.forward(img, LayerTag::DenseLayer(l)).expect("calibration images are valid");
                let hw = stack.maps.h * stack.maps.w;
                for c in 0..in_c {
                    for v in stack.maps.plane(c) {
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                count += hw as f64;
            }
            for c in 0..in_c {
                let mean = sum[c] / count;
                let var = (sq[c] / count - mean * mean).max(0.0);
                let scale = 1.0 / (var + 1e-5).sqrt();
                self.layers[l].scale[c] = scale;
                self.layers[l].shift[c] = -mean * scale;
            }
        }
    }

    fn checksum(body: &[u8]) -> Vec<u8> {
        Sha256::digest(body).to_vec()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_vec(self).map_err(|e| weights_error(path, e.to_string()))?;
        let mut bytes = Vec::with_capacity(body.len() + 44);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&WEIGHTS_FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&Self::checksum(&body));
        bytes.extend_from_slice(&body);
        fs::write(path, bytes).map_err(|e| weights_error(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| weights_error(path, e.to_string()))?;
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err(weights_error(path, "not an extractor weights file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != WEIGHTS_FORMAT_VERSION {
            return Err(weights_error(path, format!("unsupported format version {version}")));
        }
        let body = &bytes[44..];
        let actual = Self::checksum(body);
        if actual.as_slice() != &bytes[12..44] {
            return Err(weights_error(
                path,
                format!(
                    "checksum mismatch: stored {}, computed {}",
                    hex::encode(&bytes[12..44]),
                    hex::encode(&actual)
                ),
            ));
        }
        let weights: Self = serde_json::from_slice(body).map_err(|e| weights_error(path, e.to_string()))?;
        weights.check().map_err(|d| weights_error(path, d))?;
        Ok(weights)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.stem.in_c != 3 || self.stem.out_c < 16 {
            return Err("stem must map 3 channels to at least 16".into());
        }
        let mut c = self.stem.out_c;
        for (i, l) in self.layers.iter().enumerate() {
            if l.conv.in_c != c || l.scale.len() != c || l.shift.len() != c {
                return Err(format!("dense layer {i} expects {c} input channels"));
            }
            c += l.conv.out_c;
        }
        Ok(())
    }
}

fn weights_error(path: &Path, detail: String) -> Error {
    Error::Weights {
        path: PathBuf::from(path),
        detail,
    }
}

impl Extractor {
    pub fn new(weights: ExtractorWeights) -> Self {
        Self { weights }
    }

    pub fn builtin() -> Self {
        Self::new(ExtractorWeights::builtin())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(ExtractorWeights::load(path)?))
    }

    /// Weights from [`WEIGHTS_ENV`] when set, the built-in weights otherwise.
    pub fn from_env() -> Result<Self> {
        match env::var_os(WEIGHTS_ENV) {
            Some(p) => Self::load(p),
            None => Ok(Self::builtin()),
        }
    }

    pub fn weights(&self) -> &ExtractorWeights {
        &self.weights
    }

    /// Number of channels produced at `tag`.
    pub fn channels_at(&self, tag: LayerTag) -> Result<usize> {
        let depth = self.depth(tag)?;
        Ok(self.weights.stem.out_c + self.weights.layers[..depth].iter().map(|l| l.conv.out_c).sum::<usize>())
    }

    fn depth(&self, tag: LayerTag) -> Result<usize> {
        match tag {
            LayerTag::Stem => Ok(0),
            LayerTag::DenseLayer(l) if l <= self.weights.layers.len() => Ok(l),
            LayerTag::DenseLayer(l) => Err(Error::Parameter(format!(
                "dense layer {l} requested but the extractor has {}",
                self.weights.layers.len()
            ))),
        }
    }

    pub fn extract(&self, image: &ImageBuffer, tag: LayerTag) -> Result<FeatureStack> {
        Ok(self.forward(image, tag)?.0)
    }

    /// Forward pass keeping what [`Extractor::backward`] needs.
    pub fn forward(&self, image: &ImageBuffer, tag: LayerTag) -> Result<(FeatureStack, ForwardCache)> {
        if image.channels() != 3 {
            return Err(Error::Parameter("the extractor needs RGB input".into()));
        }
        self.forward_pixels(image.as_slice(), image.height(), image.width(), tag)
    }

    /// Forward pass on raw interleaved RGB values, which may lie outside
    /// `[0, 1]` (unclamped attack iterates).
    pub fn forward_pixels(
        &self,
        pixels: &[f64],
        h: usize,
        w: usize,
        tag: LayerTag,
    ) -> Result<(FeatureStack, ForwardCache)> {
        if h < MIN_ATTACK_SIDE || w < MIN_ATTACK_SIDE {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_ATTACK_SIDE,
            });
        }
        if pixels.len() != h * w * 3 {
            return Err(Error::Parameter(format!("{} values for a {h}x{w} RGB image", pixels.len())));
        }
        let depth = self.depth(tag)?;
        let mut x = Tensor::zeros(3, h, w);
        for c in 0..3 {
            let plane = x.plane_mut(c);
            for i in 0..h * w {
                plane[i] = (pixels[i * 3 + c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        let stem_pre = self.weights.stem.forward(&x);
        let stem_act = leaky_relu(&stem_pre, STEM_LEAK);
        let (mut feats, pool_idx) = max_pool(&stem_act, 3, 2, 1);
        let mut bn_pre = Vec::with_capacity(depth);
        let mut bn_act = Vec::with_capacity(depth);
        for layer in &self.weights.layers[..depth] {
            let pre = channel_affine(&feats, &layer.scale, &layer.shift);
            let act = relu(&pre);
            let new = layer.conv.forward(&act);
            feats = concat(&[&feats, &new]);
            bn_pre.push(pre);
            bn_act.push(act);
        }
        if !feats.is_finite() {
            return Err(Error::NonFiniteFeatures);
        }
        let stack = FeatureStack {
            maps: feats,
            layer_tag: tag,
            source_shape: (h, w),
        };
        let cache = ForwardCache {
            input_shape: (3, h, w),
            stem_pre,
            pool_idx,
            stem_out_shape: stem_act.shape(),
            bn_pre,
            bn_act,
            depth,
        };
        Ok((stack, cache))
    }

    /// Gradient with respect to the input pixels (interleaved `H×W×C`, as in
    /// [`ImageBuffer`]) of a scalar whose gradient with respect to the feature
    /// maps is `grad`.
    pub fn backward(&self, cache: &ForwardCache, grad: &Tensor) -> Vec<f64> {
        let mut g = grad.clone();
        for l in (0..cache.depth).rev() {
            let layer = &self.weights.layers[l];
            let parts = split(&g, &[layer.conv.in_c, layer.conv.out_c]);
            let g_act = layer.conv.backward_input(cache.bn_act[l].shape(), &parts[1]);
            let g_pre = relu_backward(&cache.bn_pre[l], &g_act);
            let mut g_prev = parts[0].clone();
            g_prev.add_assign(&channel_affine_backward(&g_pre, &layer.scale));
            g = g_prev;
        }
        let g_act = max_pool_backward(cache.stem_out_shape, &cache.pool_idx, &g);
        let g_pre = leaky_relu_backward(&cache.stem_pre, &g_act, STEM_LEAK);
        let g_x = self.weights.stem.backward_input(cache.input_shape, &g_pre);
        let (_, h, w) = cache.input_shape;
        let mut out = vec![0.0; 3 * h * w];
        for c in 0..3 {
            let plane = g_x.plane(c);
            for i in 0..h * w {
                out[i * 3 + c] = plane[i] / IMAGENET_STD[c];
            }
        }
        out
    }
}
