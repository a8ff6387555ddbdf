//! Floating-point RGB images in `[0, 1]`.
//!
//! Pixels are stored row-major, channel-interleaved (`H×W×C`). Quantisation to
//! 8 bits happens only at file I/O.

use std::path::Path;

use image::{ImageBuffer as RgbBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side accepted by the feature extractor and therefore by attacks.
pub const MIN_ATTACK_SIDE: usize = 64;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    /// Wraps raw interleaved data, clamping every element into `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Parameter(format!(
                "buffer of {} values cannot hold a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        let mut img = Self {
            height,
            width,
            channels,
            data,
        };
        img.clamp_in_place();
        Ok(img)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn ensure_attackable(&self) -> Result<()> {
        if self.height < MIN_ATTACK_SIDE || self.width < MIN_ATTACK_SIDE {
            return Err(Error::ImageTooSmall {
                height: self.height,
                width: self.width,
                min: MIN_ATTACK_SIDE,
            });
        }
        Ok(())
    }

    fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// Largest absolute element-wise difference.
    pub fn linf_distance(&self, other: &ImageBuffer) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Channel `c` as a dense `H×W` plane.
    pub fn plane(&self, c: usize) -> Plane {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Planar copy in `C×H×W` order, the layout used by the network code.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    /// Inverse of [`ImageBuffer::to_chw`]; values are clamped.
    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f64]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != hw * channels {
            return Err(Error::Parameter("planar buffer has the wrong length".into()));
        }
        let mut data = vec![0.0; chw.len()];
        for c in 0..channels {
            for i in 0..hw {
                data[i * channels + c] = chw[c * hw + i];
            }
        }
        Self::from_vec(height, width, channels, data)
    }

    /// BT.601 luma plane.
    pub fn luminance(&self) -> Plane {
        assert_eq!(self.channels, 3, "luminance needs an RGB image");
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Adds `new_luma - old_luma` to every channel, leaving chroma differences
    /// untouched, then clamps.
    pub fn with_luminance(&self, luma: &Plane) -> Result<Self> {
        let old = self.luminance();
        if luma.height != self.height || luma.width != self.width {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: (luma.height, luma.width, 1),
            });
        }
        let mut data = self.data.clone();
        for (i, px) in data.chunks_exact_mut(3).enumerate() {
            let d = luma.data[i] - old.data[i];
            for v in px {
                *v += d;
            }
        }
        Self::from_vec(self.height, self.width, 3, data)
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let mut out = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    out.push(bilinear_sample(
                        |yy, xx| self.get(yy, xx, c),
                        self.height,
                        self.width,
                        y,
                        x,
                        height,
                        width,
                    ));
                }
            }
        }
        Self {
            height,
            width,
            channels: self.channels,
            data: out,
        }
    }

    /// Largest centred square crop.
    pub fn center_crop_square(&self) -> Self {
        let side = self.height.min(self.width);
        let oy = (self.height - side) / 2;
        let ox = (self.width - side) / 2;
        Self::from_fn(side, side, self.channels, |y, x, c| self.get(y + oy, x + ox, c))
    }

    /// Rounds to the 8-bit grid, as a PNG round trip would.
    pub fn quantize_8bit(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn to_rgb8(&self) -> RgbBuffer<Rgb<u8>, Vec<u8>> {
        assert_eq!(self.channels, 3, "8-bit export needs an RGB image");
        let raw = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        RgbBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    /// Decodes any supported format (PNG, JPEG) into RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Lossless 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

/// A single-channel `H×W` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }
}

/// Samples output pixel `(y, x)` of an `oh×ow` grid from an `ih×iw` source.
#[inline]
pub(crate) fn bilinear_sample(
    src: impl Fn(usize, usize) -> f64,
    ih: usize,
    iw: usize,
    y: usize,
    x: usize,
    oh: usize,
    ow: usize,
) -> f64 {
    let (y0, y1, wy) = bilinear_taps(y, ih, oh);
    let (x0, x1, wx) = bilinear_taps(x, iw, ow);
    let top = src(y0, x0) * (1.0 - wx) + src(y0, x1) * wx;
    let bottom = src(y1, x0) * (1.0 - wx) + src(y1, x1) * wx;
    top * (1.0 - wy) + bottom * wy
}

/// Source taps and the weight of the second tap for output index `o`.
#[inline]
pub(crate) fn bilinear_taps(o: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(input - 1);
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, pos - i0 as f64)
}
