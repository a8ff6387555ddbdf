use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

/// Gradient of ReLU given its *input*.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    Tensor {
        data: input
            .data
            .iter()
            .zip(&grad.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
        ..grad.clone()
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    Tensor {
        data: x.data.iter().map(|v| if *v > 0.0 { *v } else { slope * v }).collect(),
        ..x.clone()
    }
}

/// Gradient of leaky ReLU given its *input*.
pub fn leaky_relu_backward(input: &Tensor, grad: &Tensor, slope: f64) -> Tensor {
    Tensor {
        data: input
            .data
            .iter()
            .zip(&grad.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { slope * g })
            .collect(),
        ..grad.clone()
    }
}

pub fn tanh(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|v| v.tanh()).collect(),
        ..x.clone()
    }
}

/// Gradient of tanh given its *output*.
pub fn tanh_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    Tensor {
        data: output
            .data
            .iter()
            .zip(&grad.data)
            .map(|(y, g)| g * (1.0 - y * y))
            .collect(),
        ..grad.clone()
    }
}

/// Per-channel `scale·x + shift` (a folded batch norm).
pub fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let mut out = x.clone();
    for c in 0..x.c {
        for v in out.plane_mut(c) {
            *v = *v * scale[c] + shift[c];
        }
    }
    out
}

pub fn channel_affine_backward(grad: &Tensor, scale: &[f64]) -> Tensor {
    let mut out = grad.clone();
    for c in 0..grad.c {
        for v in out.plane_mut(c) {
            *v *= scale[c];
        }
    }
    out
}

/// Max pooling; returns the output and the flat argmax index per output cell.
pub fn max_pool(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Vec<usize>) {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut idx = vec![0usize; x.c * oh * ow];
    for c in 0..x.c {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let i = iy as usize * x.w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            arg = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                idx[o] = c * x.h * x.w + arg;
            }
        }
    }
    (out, idx)
}

pub fn max_pool_backward(input_shape: (usize, usize, usize), idx: &[usize], grad: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut out = Tensor::zeros(c, h, w);
    for (g, &i) in grad.data.iter().zip(idx) {
        out.data[i] += g;
    }
    out
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    let (h, w) = (parts[0].h, parts[0].w);
    let c = parts.iter().map(|t| t.c).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for t in parts {
        assert_eq!((t.h, t.w), (h, w), "concat spatial size");
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(c, h, w, data)
}

/// Splits a concatenated gradient back into per-part tensors.
pub fn split(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let hw = grad.h * grad.w;
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let t = Tensor::from_vec(c, grad.h, grad.w, grad.data[offset * hw..(offset + c) * hw].to_vec());
            offset += c;
            t
        })
        .collect()
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (x.h * factor, x.w * factor);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / factor) * x.w + xx / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (grad.h / factor, grad.w / factor);
    let mut out = Tensor::zeros(grad.c, h, w);
    for c in 0..grad.c {
        let src = grad.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad.h {
            for x in 0..grad.w {
                dst[(y / factor) * w + x / factor] += src[y * grad.w + x];
            }
        }
    }
    out
}

/// Fully connected layer `y = W x + b`, `W` is `out × in` row-major.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("positive std");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, x: &[f64], grad: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = grad[o];
            grad_b[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let gw = &mut grad_w[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                gw[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, and its gradient.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            // log(1 + e^{-|z|}) + max(z, 0) - z t
            loss += (1.0 + (-z.abs()).exp()).ln() + z.max(0.0) - z * t;
            (sigmoid(z) - t) / n
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]);
        let (y, idx) = max_pool(&x, 2, 2, 0);
        assert_eq!(y.data, vec![0.9]);
        let g = max_pool_backward(x.shape(), &idx, &Tensor::from_vec(1, 1, 1, vec![2.0]));
        assert_eq!(g.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest(&x, 3);
        let g = Tensor::from_vec(1, 6, 6, (0..36).map(|i| i as f64 * 0.1).collect());
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let gx = upsample_nearest_backward(&g, 3);
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let z = [0.3, -1.2, 2.5];
        let t = [1.0, 0.0, 0.0];
        let (_, g) = bce_with_logits(&z, &t);
        for i in 0..3 {
            let mut zp = z;
            zp[i] += 1e-6;
            let mut zm = z;
            zm[i] -= 1e-6;
            let fd = (bce_with_logits(&zp, &t).0 - bce_with_logits(&zm, &t).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let b = Tensor::from_vec(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat(&[&a, &b]);
        let parts = split(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
