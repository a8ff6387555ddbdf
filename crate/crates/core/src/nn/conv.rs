use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// 2-D convolution (cross-correlation) with zero padding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_c × (in_c·k·k)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: vec![0.0; out_c * in_c * kernel * kernel],
            bias: vec![0.0; out_c],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_c, out_c, kernel, stride, pad);
        let fan_in = (in_c * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut conv.weight {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn cols_k(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; self.cols_k() * p];
        for ic in 0..self.in_c {
            let plane = x.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let p = oh * ow;
        let mut out = Tensor::zeros(self.in_c, h, w);
        for ic in 0..self.in_c {
            let plane = out.plane_mut(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let mut out = Tensor::zeros(self.out_c, oh, ow);
        for (oc, b) in self.bias.iter().enumerate() {
            out.plane_mut(oc).fill(*b);
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        let kk = self.cols_k();
        unsafe {
            matrixmultiply::dgemm(
                self.out_c,
                kk,
                p,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        out
    }

    /// Gradient with respect to the input of [`Conv2d::forward`].
    pub fn backward_input(&self, input_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
        let (_, h, w) = input_shape;
        let (oh, ow) = (grad_out.h, grad_out.w);
        let p = oh * ow;
        let kk = self.cols_k();
        let mut dcols = vec![0.0; kk * p];
        unsafe {
            // dcols = Wᵀ · g
            matrixmultiply::dgemm(
                kk,
                self.out_c,
                p,
                1.0,
                self.weight.as_ptr(),
                1,
                kk as isize,
                grad_out.data.as_ptr(),
                p as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        if self.is_pointwise() {
            return Tensor::from_vec(self.in_c, h, w, dcols);
        }
        self.col2im(&dcols, h, w, oh, ow)
    }

    /// Accumulates parameter gradients into `grad_w` / `grad_b`.
    pub fn backward_params(&self, input: &Tensor, grad_out: &Tensor, grad_w: &mut [f64], grad_b: &mut [f64]) {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let p = oh * ow;
        let kk = self.cols_k();
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            &input.data
        } else {
            owned = self.im2col(input, oh, ow);
            &owned
        };
        unsafe {
            // gW += g · colsᵀ
            matrixmultiply::dgemm(
                self.out_c,
                p,
                kk,
                1.0,
                grad_out.data.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                1,
                p as isize,
                1.0,
                grad_w.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        for (oc, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out.plane(oc).iter().sum::<f64>();
        }
    }
}
