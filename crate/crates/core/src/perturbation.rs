//! L∞-budgeted perturbations and their application to images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::RandomSeedContext;

/// How [`Perturbation::project`] enforces the budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    /// Scale the whole tensor by `ε / ||δ||∞` when it leaves the ball.
    #[default]
    GlobalRescale,
    /// Clip each element to `[-ε, ε]`.
    ElementClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub shape: (usize, usize, usize),
    pub delta: Vec<f64>,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn zeros(shape: (usize, usize, usize), epsilon: f64) -> Result<Self> {
        Self::from_delta(shape, vec![0.0; shape.0 * shape.1 * shape.2], epsilon)
    }

    pub fn from_delta(shape: (usize, usize, usize), delta: Vec<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if delta.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Parameter("delta length does not match shape".into()));
        }
        Ok(Self {
            shape,
            delta,
            epsilon,
        })
    }

    /// Uniform noise in `[-scale, scale]`.
    pub fn uniform(
        shape: (usize, usize, usize),
        epsilon: f64,
        scale: f64,
        ctx: RandomSeedContext,
    ) -> Result<Self> {
        let mut rng = ctx.rng();
        let n = shape.0 * shape.1 * shape.2;
        let delta = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::from_delta(shape, delta, epsilon)
    }

    pub fn linf(&self) -> f64 {
        linf_norm(&self.delta)
    }

    /// Projection onto the ε-ball with a global rescale of the whole perturbation.
    pub fn project(&self) -> Self {
        self.project_with(Projection::GlobalRescale)
    }

    pub fn project_with(&self, mode: Projection) -> Self {
        let mut out = self.clone();
        project_in_place(&mut out.delta, self.epsilon, mode);
        out
    }
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// In-place L∞ projection. A zero tensor passes through unchanged.
pub fn project_in_place(delta: &mut [f64], epsilon: f64, mode: Projection) {
    match mode {
        Projection::GlobalRescale => {
            let norm = linf_norm(delta);
            if norm > epsilon {
                let s = epsilon / norm;
                for d in delta.iter_mut() {
                    // the clamp only absorbs rounding, making the projection idempotent
                    *d = (*d * s).clamp(-epsilon, epsilon);
                }
            }
        }
        Projection::ElementClip => {
            for d in delta.iter_mut() {
                *d = d.clamp(-epsilon, epsilon);
            }
        }
    }
}

/// Returns `clamp(image + sign·δ, 0, 1)`; the input is untouched.
pub fn clamp_apply(image: &ImageBuffer, perturbation: &Perturbation, sign: f64) -> Result<ImageBuffer> {
    apply_raw(image, &perturbation.delta, perturbation.shape, sign)
}

pub(crate) fn apply_raw(
    image: &ImageBuffer,
    delta: &[f64],
    shape: (usize, usize, usize),
    sign: f64,
) -> Result<ImageBuffer> {
    if image.shape() != shape {
        return Err(Error::ShapeMismatch {
            left: image.shape(),
            right: shape,
        });
    }
    let data = image
        .as_slice()
        .iter()
        .zip(delta)
        .map(|(p, d)| p + sign * d)
        .collect();
    ImageBuffer::from_vec(shape.0, shape.1, shape.2, data)
}
