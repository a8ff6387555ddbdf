//! Watermark codecs used as attack targets.
//!
//! Two classical blind codecs quantise transform-domain statistics of the
//! luminance Haar-LL band (QIM); the learnable codec is a small
//! encoder/decoder network trained through a distortion layer.

mod classical;
pub mod distortion;
pub mod learnable;
pub mod transform;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::metrics::DEFAULT_THRESHOLDS;
use crate::payload::WatermarkPayload;

pub use classical::{
    dwt_dct_embed, dwt_dct_extract, dwt_dct_svd_embed, dwt_dct_svd_extract, DwtDct, DwtDctSvd,
    DEFAULT_QIM_STEP,
};
pub use learnable::{LearnableCodec, LearnableCodecState, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecDescriptor {
    pub name: String,
    pub payload_length: usize,
    /// Encoder strength: the QIM step for classical codecs, the residual
    /// scale for the learnable one. Unrelated to the attack budget.
    pub embedding_strength: f64,
    pub detection_thresholds: Vec<f64>,
    /// Threshold used in single-number summaries.
    pub headline_threshold: f64,
}

impl CodecDescriptor {
    pub fn new(name: &str, payload_length: usize, strength: f64, headline_threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            payload_length,
            embedding_strength: strength,
            detection_thresholds: DEFAULT_THRESHOLDS.to_vec(),
            headline_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload_length == 0 {
            return Err(crate::Error::Capacity {
                requested: 0,
                max: 0,
            });
        }
        if !(self.embedding_strength > 0.0) {
            return Err(crate::Error::Parameter("embedding strength must be positive".into()));
        }
        Ok(())
    }
}

/// A blind watermarking system: extraction sees only the (possibly attacked)
/// image.
pub trait WatermarkCodec: Send + Sync {
    fn descriptor(&self) -> &CodecDescriptor;

    fn embed_with_strength(
        &self,
        image: &ImageBuffer,
        payload: &WatermarkPayload,
        strength: f64,
    ) -> Result<ImageBuffer>;

    fn extract(&self, image: &ImageBuffer) -> Result<WatermarkPayload>;

    /// Extraction matched to an embedding made with `strength`. Decoders
    /// that do not depend on the strength ignore it.
    fn extract_with_strength(&self, image: &ImageBuffer, strength: f64) -> Result<WatermarkPayload> {
        let _ = strength;
        self.extract(image)
    }

    fn embed(&self, image: &ImageBuffer, payload: &WatermarkPayload) -> Result<ImageBuffer> {
        self.embed_with_strength(image, payload, self.descriptor().embedding_strength)
    }

    fn name(&self) -> &str {
        &self.descriptor().name
    }
}
