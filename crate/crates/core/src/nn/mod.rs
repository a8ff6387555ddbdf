//! A minimal convolutional toolkit with hand-written backward passes.
//!
//! Everything is `f64`, single-sample, `C×H×W`. Models compose these pieces
//! explicitly and keep their own activation caches; there is no tape.

mod adam;
mod conv;
mod ops;

pub use adam::AdamW;
pub use conv::Conv2d;
pub use ops::*;

/// A dense `C×H×W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
