//! DWT-DCT and DWT-DCT-SVD codecs.
//!
//! Both work on the BT.601 luminance: a one-level Haar DWT, then the LL band is
//! tiled into blocks. Payload bit `i` is written into every block whose raster
//! index is `i mod n` by quantisation-index modulation (QIM) of one statistic
//! per block; extraction averages the soft QIM decisions of those blocks.

use nalgebra::Matrix4;

use super::transform::{dct2, dct_matrix, haar_forward, haar_inverse, idct2, read_block, write_block};
use super::{CodecDescriptor, WatermarkCodec};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Plane};
use crate::payload::WatermarkPayload;

/// Default QIM step in the `[0, 1]` pixel domain.
pub const DEFAULT_QIM_STEP: f64 = 36.0 / 255.0;

const DWT_DCT_BLOCK: usize = 8;
const DWT_DCT_SVD_BLOCK: usize = 4;
/// Mid-frequency coefficient carrying the DwtDct bit (row, column).
const DWT_DCT_COEFF: (usize, usize) = (3, 2);

/// Snaps `value` onto the lattice `Q·ℤ + bit·Q/2`.
fn qim_embed(value: f64, bit: bool, step: f64) -> f64 {
    let offset = if bit { step / 2.0 } else { 0.0 };
    step * ((value - offset) / step).round() + offset
}

/// `+1` on the bit-0 lattice, `-1` on the bit-1 lattice.
fn qim_soft(value: f64, step: f64) -> f64 {
    (2.0 * std::f64::consts::PI * value / step).cos()
}

/// Hard decisions from per-block soft values, averaged per bit.
fn decide(soft: &[f64], n: usize) -> WatermarkPayload {
    let mut sums = vec![0.0; n];
    for (j, s) in soft.iter().enumerate() {
        sums[j % n] += s;
    }
    WatermarkPayload::new(sums.iter().map(|&s| s < 0.0).collect())
}

/// Number of `block`-sized LL tiles an image provides.
fn block_grid(image: &ImageBuffer, block: usize) -> (usize, usize) {
    (image.height() / 2 / block, image.width() / 2 / block)
}

fn check_capacity(image: &ImageBuffer, n: usize, block: usize) -> Result<(usize, usize)> {
    let (by, bx) = block_grid(image, block);
    let max = by * bx;
    if n == 0 || n > max {
        return Err(Error::Capacity { requested: n, max });
    }
    Ok((by, bx))
}

/// Even-sized top-left luminance region (the part the Haar DWT covers).
fn luma_region(image: &ImageBuffer) -> Plane {
    let luma = image.luminance();
    let (h, w) = (image.height() & !1, image.width() & !1);
    let mut out = Plane::new(h, w);
    for y in 0..h {
        for x in 0..w {
            *out.at_mut(y, x) = luma.at(y, x);
        }
    }
    out
}

fn write_luma_region(image: &ImageBuffer, region: &Plane) -> Result<ImageBuffer> {
    let mut luma = image.luminance();
    for y in 0..region.height {
        for x in 0..region.width {
            *luma.at_mut(y, x) = region.at(y, x);
        }
    }
    image.with_luminance(&luma)
}

/// Applies `f(block_index, ll_block)` to every LL block and rebuilds the image.
fn modify_ll_blocks(
    image: &ImageBuffer,
    block: usize,
    grid: (usize, usize),
    mut f: impl FnMut(usize, &[f64]) -> Vec<f64>,
) -> Result<ImageBuffer> {
    let mut bands = haar_forward(&luma_region(image));
    for by in 0..grid.0 {
        for bx in 0..grid.1 {
            let b = read_block(&bands.ll, by, bx, block);
            let nb = f(by * grid.1 + bx, &b);
            write_block(&mut bands.ll, by, bx, block, &nb);
        }
    }
    write_luma_region(image, &haar_inverse(&bands))
}

fn collect_ll_blocks(image: &ImageBuffer, block: usize, grid: (usize, usize)) -> Vec<Vec<f64>> {
    let bands = haar_forward(&luma_region(image));
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for by in 0..grid.0 {
        for bx in 0..grid.1 {
            out.push(read_block(&bands.ll, by, bx, block));
        }
    }
    out
}

fn check_strength(strength: f64) -> Result<()> {
    if !(strength >= 0.0) {
        return Err(Error::Parameter(format!("strength must be non-negative, got {strength}")));
    }
    Ok(())
}

/// DwtDct embedding: QIM of one mid-frequency DCT coefficient per 8×8 LL block.
/// A strength of zero leaves the image untouched.
pub fn dwt_dct_embed(image: &ImageBuffer, payload: &WatermarkPayload, strength: f64) -> Result<ImageBuffer> {
    check_strength(strength)?;
    let n = payload.len();
    let grid = check_capacity(image, n, DWT_DCT_BLOCK)?;
    if strength == 0.0 {
        return Ok(image.clone());
    }
    let d = dct_matrix(DWT_DCT_BLOCK);
    let pos = DWT_DCT_COEFF.0 * DWT_DCT_BLOCK + DWT_DCT_COEFF.1;
    let bits = payload.bits();
    modify_ll_blocks(image, DWT_DCT_BLOCK, grid, |j, b| {
        let mut c = dct2(b, &d, DWT_DCT_BLOCK);
        c[pos] = qim_embed(c[pos], bits[j % n], strength);
        idct2(&c, &d, DWT_DCT_BLOCK)
    })
}

/// Blind DwtDct extraction of `descriptor.payload_length` bits.
pub fn dwt_dct_extract(image: &ImageBuffer, descriptor: &CodecDescriptor) -> Result<WatermarkPayload> {
    let n = descriptor.payload_length;
    let grid = check_capacity(image, n, DWT_DCT_BLOCK)?;
    let d = dct_matrix(DWT_DCT_BLOCK);
    let pos = DWT_DCT_COEFF.0 * DWT_DCT_BLOCK + DWT_DCT_COEFF.1;
    let soft: Vec<f64> = collect_ll_blocks(image, DWT_DCT_BLOCK, grid)
        .iter()
        .map(|b| qim_soft(dct2(b, &d, DWT_DCT_BLOCK)[pos], descriptor.embedding_strength))
        .collect();
    Ok(decide(&soft, n))
}

fn leading_singular(block: &[f64]) -> (f64, nalgebra::Vector4<f64>, nalgebra::Vector4<f64>) {
    let m = Matrix4::from_row_slice(block);
    let svd = m.svd(true, true);
    let i = svd.singular_values.imax();
    let u = svd.u.expect("u requested").column(i).into_owned();
    let v = svd.v_t.expect("v_t requested").row(i).transpose();
    (svd.singular_values[i], u, v)
}

/// DwtDctSvd embedding: QIM of the leading singular value of each 4×4
/// DCT-transformed LL block.
pub fn dwt_dct_svd_embed(image: &ImageBuffer, payload: &WatermarkPayload, strength: f64) -> Result<ImageBuffer> {
    check_strength(strength)?;
    let n = payload.len();
    let grid = check_capacity(image, n, DWT_DCT_SVD_BLOCK)?;
    if strength == 0.0 {
        return Ok(image.clone());
    }
    let d = dct_matrix(DWT_DCT_SVD_BLOCK);
    let bits = payload.bits();
    modify_ll_blocks(image, DWT_DCT_SVD_BLOCK, grid, |j, b| {
        let c = dct2(b, &d, DWT_DCT_SVD_BLOCK);
        let (s, u, v) = leading_singular(&c);
        let target = qim_embed(s, bits[j % n], strength).max(0.0);
        // rank-one update moves only the leading singular value
        let delta = (u * v.transpose()) * (target - s);
        let mut c2 = c.clone();
        for r in 0..4 {
            for col in 0..4 {
                c2[r * 4 + col] += delta[(r, col)];
            }
        }
        idct2(&c2, &d, DWT_DCT_SVD_BLOCK)
    })
}

pub fn dwt_dct_svd_extract(image: &ImageBuffer, descriptor: &CodecDescriptor) -> Result<WatermarkPayload> {
    let n = descriptor.payload_length;
    let grid = check_capacity(image, n, DWT_DCT_SVD_BLOCK)?;
    let d = dct_matrix(DWT_DCT_SVD_BLOCK);
    let soft: Vec<f64> = collect_ll_blocks(image, DWT_DCT_SVD_BLOCK, grid)
        .iter()
        .map(|b| qim_soft(leading_singular(&dct2(b, &d, DWT_DCT_SVD_BLOCK)).0, descriptor.embedding_strength))
        .collect();
    Ok(decide(&soft, n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwtDct {
    descriptor: CodecDescriptor,
}

impl DwtDct {
    pub fn new(payload_length: usize, strength: f64) -> Self {
        Self {
            descriptor: CodecDescriptor::new("dwtdct", payload_length, strength, 0.625),
        }
    }
}

impl Default for DwtDct {
    fn default() -> Self {
        Self::new(32, DEFAULT_QIM_STEP)
    }
}

impl WatermarkCodec for DwtDct {
    fn descriptor(&self) -> &CodecDescriptor {
        &self.descriptor
    }

    fn embed_with_strength(&self, image: &ImageBuffer, payload: &WatermarkPayload, strength: f64) -> Result<ImageBuffer> {
        dwt_dct_embed(image, payload, strength)
    }

    fn extract(&self, image: &ImageBuffer) -> Result<WatermarkPayload> {
        dwt_dct_extract(image, &self.descriptor)
    }

    fn extract_with_strength(&self, image: &ImageBuffer, strength: f64) -> Result<WatermarkPayload> {
        let descriptor = CodecDescriptor {
            embedding_strength: strength,
            ..self.descriptor.clone()
        };
        dwt_dct_extract(image, &descriptor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwtDctSvd {
    descriptor: CodecDescriptor,
}

impl DwtDctSvd {
    pub fn new(payload_length: usize, strength: f64) -> Self {
        Self {
            descriptor: CodecDescriptor::new("dwtdctsvd", payload_length, strength, 0.625),
        }
    }
}

impl Default for DwtDctSvd {
    fn default() -> Self {
        Self::new(32, DEFAULT_QIM_STEP)
    }
}

impl WatermarkCodec for DwtDctSvd {
    fn descriptor(&self) -> &CodecDescriptor {
        &self.descriptor
    }

    fn embed_with_strength(&self, image: &ImageBuffer, payload: &WatermarkPayload, strength: f64) -> Result<ImageBuffer> {
        dwt_dct_svd_embed(image, payload, strength)
    }

    fn extract(&self, image: &ImageBuffer) -> Result<WatermarkPayload> {
        dwt_dct_svd_extract(image, &self.descriptor)
    }

    fn extract_with_strength(&self, image: &ImageBuffer, strength: f64) -> Result<WatermarkPayload> {
        let descriptor = CodecDescriptor {
            embedding_strength: strength,
            ..self.descriptor.clone()
        };
        dwt_dct_svd_extract(image, &descriptor)
    }
}
