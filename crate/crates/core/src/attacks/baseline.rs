//! Image-degradation baselines.

use serde::{Deserialize, Serialize};

use crate::codecs::distortion::{gaussian_blur_image, gaussian_noise_image, jpeg_image};
use crate::error::Result;
use crate::image::ImageBuffer;
use crate::rng::RandomSeedContext;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Quality 10–95.
    Jpeg { quality: u8 },
    /// Noise σ in `[0, 0.1]`.
    GaussianNoise { sigma: f64 },
    /// Kernel σ in `[0.5, 5]`.
    GaussianBlur { sigma: f64 },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Jpeg { .. } => "jpeg",
            BaselineKind::GaussianNoise { .. } => "gaussian_noise",
            BaselineKind::GaussianBlur { .. } => "gaussian_blur",
        }
    }

    pub fn intensity(&self) -> f64 {
        match *self {
            BaselineKind::Jpeg { quality } => f64::from(quality),
            BaselineKind::GaussianNoise { sigma } | BaselineKind::GaussianBlur { sigma } => sigma,
        }
    }
}

/// Applies the degradation. JPEG and blur are deterministic; noise draws
/// from `ctx`.
pub fn baseline_attack(image_wm: &ImageBuffer, kind: BaselineKind, ctx: RandomSeedContext) -> Result<ImageBuffer> {
    match kind {
        BaselineKind::Jpeg { quality } => jpeg_image(image_wm, quality),
        BaselineKind::GaussianNoise { sigma } => gaussian_noise_image(image_wm, sigma, ctx),
        BaselineKind::GaussianBlur { sigma } => gaussian_blur_image(image_wm, sigma),
    }
}
