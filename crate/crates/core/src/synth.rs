//! Procedural natural-looking test images.
//!
//! Images combine multi-octave value noise (a roughly `1/f` spectrum), a
//! smooth illumination gradient, a handful of soft-edged shapes and fine
//! grain. They stand in for photographs when no corpus directory is given.

use rand::Rng;

use crate::image::ImageBuffer;
use crate::rng::{stream, RandomSeedContext};

/// Bilinearly interpolated lattice noise with `cells` cells across the image.
fn value_noise(size: usize, cells: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 * cells as f64 / size as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..size {
            let fx = x as f64 * cells as f64 / size as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let a = lattice[y0 * n + x0];
            let b = lattice[y0 * n + x0 + 1];
            let c = lattice[(y0 + 1) * n + x0];
            let d = lattice[(y0 + 1) * n + x0 + 1];
            out[y * size + x] = (a * (1.0 - sx) + b * sx) * (1.0 - sy) + (c * (1.0 - sx) + d * sx) * sy;
        }
    }
    out
}

fn fractal(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut cells = 2;
    while cells <= size / 2 {
        for (o, v) in out.iter_mut().zip(value_noise(size, cells, rng)) {
            *o += amp * v;
        }
        amp *= 0.55;
        cells *= 2;
    }
    out
}

/// One synthetic RGB image of side `size`.
pub fn natural_image(size: usize, ctx: RandomSeedContext) -> ImageBuffer {
    let mut rng = ctx.rng();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    // luminance-like field shared by all channels plus weaker chroma fields
    let shared = fractal(size, &mut rng);
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| fractal(size, &mut rng)).collect();
    let contrast = rng.random_range(0.12..0.3);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let g = gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
            for c in 0..3 {
                data[i * 3 + c] = base[c] + g + contrast * shared[i] + 0.35 * contrast * chroma[c][i];
            }
        }
    }
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(0.08..0.3) * size as f64;
        let ellipse = rng.random_bool(0.5);
        let aspect = rng.random_range(0.5..2.0);
        let opacity = rng.random_range(0.5..0.95);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 - cx) / r;
                let dy = (y as f64 - cy) / (r * aspect);
                let dist = if ellipse { (dx * dx + dy * dy).sqrt() } else { dx.abs().max(dy.abs()) };
                // soft edge about one pixel wide
                let alpha = opacity * (((1.0 - dist) * r).clamp(-0.5, 0.5) + 0.5);
                if alpha > 0.0 {
                    let i = (y * size + x) * 3;
                    for c in 0..3 {
                        data[i + c] = (1.0 - alpha) * data[i + c] + alpha * (colour[c] + 0.5 * contrast * shared[y * size + x]);
                    }
                }
            }
        }
    }
    let grain = rng.random_range(0.0..0.015);
    for v in data.iter_mut() {
        *v += grain * rng.random_range(-1.0..1.0);
    }
    ImageBuffer::from_vec(size, size, 3, data).expect("length matches")
}

/// `count` independent images; image `i` uses `seed ⊕ i`.
pub fn corpus(count: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    let base = RandomSeedContext::new(seed, stream::SYNTHESIS);
    (0..count).map(|i| natural_image(size, base.for_item(i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = corpus(3, 64, 11);
        let b = corpus(3, 64, 11);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn images_have_texture_and_range() {
        for img in corpus(4, 64, 2) {
            let s = img.as_slice();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
            assert!(var.sqrt() > 0.03, "too flat: {}", var.sqrt());
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
