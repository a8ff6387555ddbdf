//! Windowed SSIM on single planes, with an analytic gradient.
//!
//! Windows are 11×11 Gaussian (σ = 1.5) and only fully contained windows
//! contribute (`valid` filtering), so an `H×W` plane yields an
//! `(H-10)×(W-10)` SSIM map whose mean is the score.

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    g
}

/// Separable valid correlation with the Gaussian window.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * row[x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let r = &tmp[(y + k) * ow..(y + k + 1) * ow];
            let o = &mut out[y * ow..(y + 1) * ow];
            for x in 0..ow {
                o[x] += gk * r[x];
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_transpose(src: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        let s = &src[y * ow..(y + 1) * ow];
        for (k, gk) in g.iter().enumerate() {
            let t = &mut tmp[(y + k) * ow..(y + k + 1) * ow];
            for x in 0..ow {
                t[x] += gk * s[x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let t = &tmp[y * ow..(y + 1) * ow];
        let o = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            for (k, gk) in g.iter().enumerate() {
                o[x + k] += gk * t[x];
            }
        }
    }
    out
}

struct Moments {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    aa: Vec<f64>,
    bb: Vec<f64>,
    ab: Vec<f64>,
}

fn check(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<()> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Parameter("plane length does not match its dimensions".into()));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs planes of at least {WINDOW}x{WINDOW}, got {h}x{w}"
        )));
    }
    Ok(())
}

fn moments(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Moments {
    let sq_a: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|v| v * v).collect();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    Moments {
        mu_a: filter_valid(a, h, w, g),
        mu_b: filter_valid(b, h, w, g),
        aa: filter_valid(&sq_a, h, w, g),
        bb: filter_valid(&sq_b, h, w, g),
        ab: filter_valid(&prod, h, w, g),
    }
}

/// Mean SSIM of two `h×w` planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    check(a, b, h, w)?;
    let g = gaussian_window();
    let m = moments(a, b, h, w, &g);
    let n = m.mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (m.mu_a[i], m.mu_b[i]);
        let va = m.aa[i] - ma * ma;
        let vb = m.bb[i] - mb * mb;
        let cov = m.ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / n as f64)
}

/// Mean SSIM and its gradient with respect to `b`.
pub fn ssim_plane_grad(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    check(a, b, h, w)?;
    let g = gaussian_window();
    let m = moments(a, b, h, w, &g);
    let n = m.mu_a.len();
    let inv_n = 1.0 / n as f64;
    let mut d_mu = vec![0.0; n];
    let mut d_bb = vec![0.0; n];
    let mut d_ab = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (m.mu_a[i], m.mu_b[i]);
        let va = m.aa[i] - ma * ma;
        let vb = m.bb[i] - mb * mb;
        let cov = m.ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = va + vb + C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        // partials with E[ab] and E[b²] held fixed
        d_mu[i] = inv_n
            * ((2.0 * ma * a2 - 2.0 * ma * a1) / (b1 * b2) - s * (2.0 * mb / b1 - 2.0 * mb / b2));
        d_ab[i] = inv_n * 2.0 * a1 / (b1 * b2);
        d_bb[i] = inv_n * (-s / b2);
    }
    let g_mu = filter_valid_transpose(&d_mu, h, w, &g);
    let g_bb = filter_valid_transpose(&d_bb, h, w, &g);
    let g_ab = filter_valid_transpose(&d_ab, h, w, &g);
    let grad = (0..h * w)
        .map(|i| g_mu[i] + 2.0 * b[i] * g_bb[i] + a[i] * g_ab[i])
        .collect();
    Ok((total * inv_n, grad))
}
