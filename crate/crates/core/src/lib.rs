//! Blind image watermarking laboratory.
//!
//! The crate bundles three classical/learnable watermark codecs, a
//! DenseNet-shaped feature extractor with a clustering-based locator for
//! watermark-leaking channels, the evasion and two-stage forgery attacks that
//! optimise perturbations against those channels, and the metrics and
//! capacity calculations used to evaluate them.

pub mod attacks;
pub mod codecs;
pub mod error;
pub mod features;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod payload;
pub mod perturbation;
pub mod rng;
pub mod synth;
pub mod theory;

pub use crate::error::{Error, Result};
pub use crate::image::ImageBuffer;
pub use crate::payload::WatermarkPayload;
pub use crate::perturbation::{clamp_apply, Perturbation, Projection};
pub use crate::rng::RandomSeedContext;
