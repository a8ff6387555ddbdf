//! Orthonormal one-level Haar DWT and block DCT.

use crate::image::Plane;

/// The four subbands of a one-level Haar decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub ll: Plane,
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

/// Requires even dimensions.
pub fn haar_forward(p: &Plane) -> Subbands {
    assert!(p.height % 2 == 0 && p.width % 2 == 0, "Haar DWT needs even dimensions");
    let (h, w) = (p.height / 2, p.width / 2);
    let mut ll = Plane::new(h, w);
    let mut lh = Plane::new(h, w);
    let mut hl = Plane::new(h, w);
    let mut hh = Plane::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let a = p.at(2 * y, 2 * x);
            let b = p.at(2 * y, 2 * x + 1);
            let c = p.at(2 * y + 1, 2 * x);
            let d = p.at(2 * y + 1, 2 * x + 1);
            *ll.at_mut(y, x) = (a + b + c + d) / 2.0;
            *lh.at_mut(y, x) = (a - b + c - d) / 2.0;
            *hl.at_mut(y, x) = (a + b - c - d) / 2.0;
            *hh.at_mut(y, x) = (a - b - c + d) / 2.0;
        }
    }
    Subbands { ll, lh, hl, hh }
}

pub fn haar_inverse(s: &Subbands) -> Plane {
    let (h, w) = (s.ll.height, s.ll.width);
    let mut p = Plane::new(2 * h, 2 * w);
    for y in 0..h {
        for x in 0..w {
            let (ll, lh, hl, hh) = (s.ll.at(y, x), s.lh.at(y, x), s.hl.at(y, x), s.hh.at(y, x));
            *p.at_mut(2 * y, 2 * x) = (ll + lh + hl + hh) / 2.0;
            *p.at_mut(2 * y, 2 * x + 1) = (ll - lh + hl - hh) / 2.0;
            *p.at_mut(2 * y + 1, 2 * x) = (ll + lh - hl - hh) / 2.0;
            *p.at_mut(2 * y + 1, 2 * x + 1) = (ll - lh - hl + hh) / 2.0;
        }
    }
    p
}

/// Orthonormal DCT-II basis, `n×n` row-major (`row k` = frequency `k`).
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] =
                scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// `D · X · Dᵀ` for an `n×n` block.
pub fn dct2(block: &[f64], d: &[f64], n: usize) -> Vec<f64> {
    let tmp = matmul(d, block, n, false, false);
    matmul(&tmp, d, n, false, true)
}

/// `Dᵀ · C · D`.
pub fn idct2(coeffs: &[f64], d: &[f64], n: usize) -> Vec<f64> {
    let tmp = matmul(d, coeffs, n, true, false);
    matmul(&tmp, d, n, false, false)
}

fn matmul(a: &[f64], b: &[f64], n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let av = if ta { a[k * n + i] } else { a[i * n + k] };
                let bv = if tb { b[j * n + k] } else { b[k * n + j] };
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Copies block `(by, bx)` of size `n` out of a plane.
pub fn read_block(p: &Plane, by: usize, bx: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            out.push(p.at(by * n + y, bx * n + x));
        }
    }
    out
}

pub fn write_block(p: &mut Plane, by: usize, bx: usize, n: usize, block: &[f64]) {
    for y in 0..n {
        for x in 0..n {
            *p.at_mut(by * n + y, bx * n + x) = block[y * n + x];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize) -> Plane {
        Plane {
            height: h,
            width: w,
            data: (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        }
    }

    #[test]
    fn haar_is_perfect_reconstruction_and_energy_preserving() {
        let p = plane(8, 12);
        let s = haar_forward(&p);
        let back = haar_inverse(&s);
        for (a, b) in p.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let e0: f64 = p.data.iter().map(|v| v * v).sum();
        let e1: f64 = [&s.ll, &s.lh, &s.hl, &s.hh]
            .iter()
            .flat_map(|b| b.data.iter())
            .map(|v| v * v)
            .sum();
        assert!((e0 - e1).abs() < 1e-10);
    }

    #[test]
    fn dct_round_trip() {
        for n in [4, 8] {
            let d = dct_matrix(n);
            let block: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.37).sin()).collect();
            let back = idct2(&dct2(&block, &d, n), &d, n);
            for (a, b) in block.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dct_of_constant_is_dc_only() {
        let d = dct_matrix(4);
        let c = dct2(&[0.5; 16], &d, 4);
        assert!((c[0] - 2.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
