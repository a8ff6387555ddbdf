//! Image degradations: the attack baselines and the codec training layer.
//!
//! The `*_image` functions act on [`ImageBuffer`]s and are what the baseline
//! attacks and robustness checks use. [`DistortionLayer`] wraps the same
//! operations for `C×H×W` tensors with backward passes, substituting a
//! straight-through quantiser for real JPEG.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::transform::{dct2, dct_matrix, idct2};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::Tensor;
use crate::rng::RandomSeedContext;

/// Valid range for JPEG quality.
pub const JPEG_QUALITY_RANGE: (u8, u8) = (10, 95);
/// Valid range for additive noise σ.
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.0, 0.1);
/// Valid range for blur kernel σ.
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 5.0);

/// Standard JPEG luminance quantisation table (quality 50).
const LUMA_QTABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57.,
    69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64.,
    81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Standard JPEG chrominance quantisation table (quality 50).
const CHROMA_QTABLE: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99.,
    99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

/// Real baseline JPEG round trip through the `image` crate's encoder.
pub fn jpeg_image(image: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    if !(JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1).contains(&quality) {
        return Err(Error::Parameter(format!(
            "jpeg quality {quality} outside {}..={}",
            JPEG_QUALITY_RANGE.0, JPEG_QUALITY_RANGE.1
        )));
    }
    let rgb = image.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
        .decode()?
        .to_rgb8();
    Ok(ImageBuffer::from_rgb8(&decoded))
}

/// Additive white Gaussian noise, clamped to `[0, 1]`.
pub fn gaussian_noise_image(image: &ImageBuffer, sigma: f64, ctx: RandomSeedContext) -> Result<ImageBuffer> {
    if !(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1).contains(&sigma) {
        return Err(Error::Parameter(format!("noise sigma {sigma} outside [0, 0.1]")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ctx.rng();
    let data = image.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect();
    ImageBuffer::from_vec(image.height(), image.width(), image.channels(), data)
}

/// Separable Gaussian blur with reflect padding and a `±3σ` kernel.
pub fn gaussian_blur_image(image: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1).contains(&sigma) {
        return Err(Error::Parameter(format!("blur sigma {sigma} outside [0.5, 5]")));
    }
    let (h, w, c) = image.shape();
    let chw = image.to_chw();
    let kernel = gaussian_kernel(sigma);
    let mut out = Vec::with_capacity(chw.len());
    for ch in 0..c {
        out.extend(blur_plane(&chw[ch * h * w..(ch + 1) * h * w], h, w, &kernel));
    }
    ImageBuffer::from_chw(h, w, c, &out)
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Reflect-101 index (`-1 → 1`, `n → n-2`), iterated for long kernels.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, kernel: &[f64], adjoint: bool) {
    let r = (kernel.len() / 2) as isize;
    for i in 0..len {
        for (k, &wk) in kernel.iter().enumerate() {
            let j = reflect(i as isize + k as isize - r, len);
            if adjoint {
                dst[j * stride] += wk * src[i * stride];
            } else {
                dst[i * stride] += wk * src[j * stride];
            }
        }
    }
}

fn blur_plane_impl(p: &[f64], h: usize, w: usize, kernel: &[f64], adjoint: bool) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        blur_1d(&p[y * w..], &mut tmp[y * w..], w, 1, kernel, adjoint);
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        blur_1d(&tmp[x..], &mut out[x..], h, w, kernel, adjoint);
    }
    out
}

pub(crate) fn blur_plane(p: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    blur_plane_impl(p, h, w, kernel, false)
}

fn blur_plane_adjoint(p: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    blur_plane_impl(p, h, w, kernel, true)
}

/// Quality-scaled quantisation table (IJG convention).
fn scaled_table(base: &[f64; 64], quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, b) in t.iter_mut().zip(base) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// JPEG-like quantisation of a `3×H×W` tensor: YCbCr, 8×8 DCT, rounding with
/// quality-scaled tables. Borders not covered by full blocks pass through.
fn jpeg_approx(x: &Tensor, quality: f64) -> Tensor {
    let (h, w) = (x.h, x.w);
    let n = h * w;
    let (r, g, b) = (&x.data[..n], &x.data[n..2 * n], &x.data[2 * n..3 * n]);
    let mut ycc = vec![0.0; 3 * n];
    for i in 0..n {
        let (rr, gg, bb) = (r[i] * 255.0, g[i] * 255.0, b[i] * 255.0);
        ycc[i] = 0.299 * rr + 0.587 * gg + 0.114 * bb - 128.0;
        ycc[n + i] = -0.168736 * rr - 0.331264 * gg + 0.5 * bb;
        ycc[2 * n + i] = 0.5 * rr - 0.418688 * gg - 0.081312 * bb;
    }
    let d = dct_matrix(8);
    let tables = [scaled_table(&LUMA_QTABLE, quality), scaled_table(&CHROMA_QTABLE, quality)];
    for ch in 0..3 {
        let table = &tables[usize::from(ch > 0)];
        let plane = &mut ycc[ch * n..(ch + 1) * n];
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                let mut block = [0.0; 64];
                for yy in 0..8 {
                    for xx in 0..8 {
                        block[yy * 8 + xx] = plane[(by * 8 + yy) * w + bx * 8 + xx];
                    }
                }
                let mut c = dct2(&block, &d, 8);
                for (v, q) in c.iter_mut().zip(table) {
                    *v = (*v / q).round() * q;
                }
                let back = idct2(&c, &d, 8);
                for yy in 0..8 {
                    for xx in 0..8 {
                        plane[(by * 8 + yy) * w + bx * 8 + xx] = back[yy * 8 + xx];
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(3, h, w);
    for i in 0..n {
        let (y, cb, cr) = (ycc[i] + 128.0, ycc[n + i], ycc[2 * n + i]);
        out.data[i] = (y + 1.402 * cr) / 255.0;
        out.data[n + i] = (y - 0.344136 * cb - 0.714136 * cr) / 255.0;
        out.data[2 * n + i] = (y + 1.772 * cb) / 255.0;
    }
    out
}

/// One distortion family with its sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistortionKind {
    Identity,
    GaussianNoise { sigma_min: f64, sigma_max: f64 },
    GaussianBlur { sigma_min: f64, sigma_max: f64 },
    Jpeg { quality_min: f64, quality_max: f64 },
}

/// A sampled distortion, remembered so the backward pass can replay it.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedDistortion {
    Identity,
    Noise,
    Blur(Vec<f64>),
    Jpeg,
}

/// Training-time distortion layer: one kind sampled uniformly per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionLayer {
    pub kinds: Vec<DistortionKind>,
}

impl Default for DistortionLayer {
    fn default() -> Self {
        Self {
            kinds: vec![
                DistortionKind::Identity,
                DistortionKind::GaussianNoise { sigma_min: 0.005, sigma_max: 0.03 },
                DistortionKind::GaussianBlur { sigma_min: 0.5, sigma_max: 1.2 },
                DistortionKind::Jpeg { quality_min: 60.0, quality_max: 90.0 },
            ],
        }
    }
}

impl DistortionLayer {
    pub fn forward(&self, x: &Tensor, rng: &mut impl Rng) -> (Tensor, AppliedDistortion) {
        if self.kinds.is_empty() {
            return (x.clone(), AppliedDistortion::Identity);
        }
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        match kind {
            DistortionKind::Identity => (x.clone(), AppliedDistortion::Identity),
            DistortionKind::GaussianNoise { sigma_min, sigma_max } => {
                let sigma = rng.random_range(sigma_min..=sigma_max);
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let mut out = x.clone();
                out.data.iter_mut().for_each(|v| *v += normal.sample(rng));
                (out, AppliedDistortion::Noise)
            }
            DistortionKind::GaussianBlur { sigma_min, sigma_max } => {
                let kernel = gaussian_kernel(rng.random_range(sigma_min..=sigma_max));
                let mut out = Tensor::zeros(x.c, x.h, x.w);
                for ch in 0..x.c {
                    out.plane_mut(ch).copy_from_slice(&blur_plane(x.plane(ch), x.h, x.w, &kernel));
                }
                (out, AppliedDistortion::Blur(kernel))
            }
            DistortionKind::Jpeg { quality_min, quality_max } => {
                let q = rng.random_range(quality_min..=quality_max);
                (jpeg_approx(x, q), AppliedDistortion::Jpeg)
            }
        }
    }

    /// Gradient through a sampled distortion; noise and JPEG are treated as
    /// identity (straight-through).
    pub fn backward(applied: &AppliedDistortion, grad: &Tensor) -> Tensor {
        match applied {
            AppliedDistortion::Blur(kernel) => {
                let mut out = Tensor::zeros(grad.c, grad.h, grad.w);
                for ch in 0..grad.c {
                    out.plane_mut(ch)
                        .copy_from_slice(&blur_plane_adjoint(grad.plane(ch), grad.h, grad.w, kernel));
                }
                out
            }
            _ => grad.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use rand::SeedableRng;

    fn textured() -> ImageBuffer {
        ImageBuffer::from_fn(48, 40, 3, |y, x, c| {
            0.5 + 0.3 * ((y as f64 * 0.3 + c as f64).sin() * (x as f64 * 0.2).cos())
        })
    }

    #[test]
    fn blur_adjoint_identity() {
        let (h, w) = (9, 13);
        let k = gaussian_kernel(1.3);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 7919) % 31) as f64 / 31.0 - 0.5).collect();
        let b: Vec<f64> = (0..h * w).map(|i| ((i * 104729) % 17) as f64 / 17.0 - 0.5).collect();
        let lhs: f64 = blur_plane(&a, h, w, &k).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(blur_plane_adjoint(&b, h, w, &k)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImageBuffer::filled(20, 20, 3, 0.4);
        let out = gaussian_blur_image(&img, 2.0).unwrap();
        assert!(img.linf_distance(&out).unwrap() < 1e-12);
    }

    #[test]
    fn noise_zero_is_identity_and_ranges_checked() {
        let img = textured();
        let ctx = RandomSeedContext::new(1, 5);
        assert_eq!(gaussian_noise_image(&img, 0.0, ctx).unwrap(), img);
        assert!(gaussian_noise_image(&img, 0.2, ctx).is_err());
        assert!(gaussian_blur_image(&img, 0.1).is_err());
        assert!(jpeg_image(&img, 5).is_err());
        assert!(jpeg_image(&img, 96).is_err());
    }

    #[test]
    fn jpeg_high_quality_is_close() {
        let img = textured();
        let out = jpeg_image(&img, 95).unwrap();
        assert!(psnr(&img, &out).unwrap() >= 35.0);
    }

    #[test]
    fn jpeg_approx_tracks_real_jpeg() {
        let img = textured().resize(48, 48).quantize_8bit();
        let t = Tensor::from_vec(3, 48, 48, img.to_chw());
        let approx = ImageBuffer::from_chw(48, 48, 3, &jpeg_approx(&t, 75.0).data).unwrap();
        let real = jpeg_image(&img, 75).unwrap();
        // the real encoder subsamples chroma, so only require rough agreement
        assert!(psnr(&approx, &real).unwrap() > 28.0);
    }

    #[test]
    fn layer_is_seeded() {
        let layer = DistortionLayer::default();
        let t = Tensor::from_vec(3, 16, 16, textured().resize(16, 16).to_chw());
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            assert_eq!(layer.forward(&t, &mut r1).0, layer.forward(&t, &mut r2).0);
        }
    }
}
