//! Multi-channel features and the leakage-channel locator.
//!
//! A watermark that survives a distortion layer tends to leave a pattern that
//! recurs across images in a minority of extractor channels. The locator
//! clusters per-channel activation maps and keeps the two smallest clusters.

mod extractor;
mod feasibility;
mod locator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use extractor::{Extractor, ExtractorWeights, ForwardCache, WEIGHTS_ENV, WEIGHTS_FORMAT_VERSION};
pub use feasibility::{feasibility_report, ChannelDiagnostic, FeasibilityReport};
pub use locator::{locate_leakage_channels, locate_with, ClusterInfo, LocatorConfig};

/// Depth at which features are read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerTag {
    /// After the stem convolution and pooling.
    #[default]
    Stem,
    /// After the given number of dense layers.
    DenseLayer(usize),
}

impl std::fmt::Display for LayerTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerTag::Stem => write!(f, "stem"),
            LayerTag::DenseLayer(l) => write!(f, "dense{l}"),
        }
    }
}

impl TryFrom<String> for LayerTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerTag> for String {
    fn from(t: LayerTag) -> String {
        t.to_string()
    }
}

impl std::str::FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "stem" {
            return Ok(LayerTag::Stem);
        }
        s.strip_prefix("dense")
            .and_then(|n| n.parse().ok())
            .map(LayerTag::DenseLayer)
            .ok_or_else(|| Error::Parameter(format!("unknown layer tag {s:?} (expected stem or denseN)")))
    }
}

/// Activations `channels × h' × w'` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub maps: Tensor,
    pub layer_tag: LayerTag,
    pub source_shape: (usize, usize),
}

impl FeatureStack {
    pub fn channels(&self) -> usize {
        self.maps.c
    }

    pub fn ensure_same_shape(&self, other: &FeatureStack) -> Result<()> {
        if self.maps.shape() != other.maps.shape() {
            return Err(Error::ShapeMismatch {
                left: self.maps.shape(),
                right: other.maps.shape(),
            });
        }
        Ok(())
    }

    /// `𝒲·F`: non-selected channels zeroed, selected ones copied exactly.
    pub fn masked(&self, weights: &ChannelWeights) -> Result<FeatureStack> {
        if weights.mask.len() != self.channels() {
            return Err(Error::LengthMismatch(weights.mask.len(), self.channels()));
        }
        let mut out = self.clone();
        for (c, &keep) in weights.mask.iter().enumerate() {
            if !keep {
                out.maps.plane_mut(c).fill(0.0);
            }
        }
        Ok(out)
    }
}

/// Binary channel selection `𝒲` with the clustering that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    mask: Vec<bool>,
    pub selected_count: usize,
    /// Empty when the weights were not produced by the locator.
    pub cluster_report: Vec<ClusterInfo>,
}

impl ChannelWeights {
    /// Arbitrary selection with at least one channel, for ablations and tests.
    pub fn from_mask(mask: Vec<bool>) -> Result<Self> {
        let selected_count = mask.iter().filter(|&&b| b).count();
        if selected_count == 0 {
            return Err(Error::Parameter("channel selection is empty".into()));
        }
        Ok(Self {
            mask,
            selected_count,
            cluster_report: Vec::new(),
        })
    }

    /// Every channel selected (the "without 𝒲" ablation).
    pub fn all(channels: usize) -> Self {
        Self {
            mask: vec![true; channels],
            selected_count: channels,
            cluster_report: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_selected(&self, c: usize) -> bool {
        self.mask[c]
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&c| self.mask[c]).collect()
    }

    /// 0/1 weight vector.
    pub fn weights(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| f64::from(u8::from(b))).collect()
    }

    /// `1 − 𝒲`. Fails when every channel is selected.
    pub fn complement(&self) -> Result<ChannelWeights> {
        let mask: Vec<bool> = self.mask.iter().map(|b| !b).collect();
        let mut out = Self::from_mask(mask)
            .map_err(|_| Error::Parameter("complement of a full selection is empty".into()))?;
        out.cluster_report = self.cluster_report.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_plus_complement_is_ones() {
        let w = ChannelWeights::from_mask(vec![true, false, false, true, false]).unwrap();
        let c = w.complement().unwrap();
        let sum: Vec<f64> = w.weights().iter().zip(c.weights()).map(|(a, b)| a + b).collect();
        assert_eq!(sum, vec![1.0; 5]);
        assert!(ChannelWeights::all(3).complement().is_err());
        assert!(ChannelWeights::from_mask(vec![false; 3]).is_err());
    }

    #[test]
    fn masking_is_exact() {
        let maps = Tensor::from_vec(3, 2, 2, (0..12).map(|i| i as f64 * 0.37 - 1.1).collect());
        let stack = FeatureStack {
            maps,
            layer_tag: LayerTag::Stem,
            source_shape: (8, 8),
        };
        let w = ChannelWeights::from_mask(vec![false, true, false]).unwrap();
        let m = stack.masked(&w).unwrap();
        assert_eq!(m.maps.plane(1), stack.maps.plane(1));
        assert!(m.maps.plane(0).iter().chain(m.maps.plane(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn layer_tag_parsing() {
        assert_eq!("stem".parse::<LayerTag>().unwrap(), LayerTag::Stem);
        assert_eq!("dense3".parse::<LayerTag>().unwrap(), LayerTag::DenseLayer(3));
        assert!("conv".parse::<LayerTag>().is_err());
        assert_eq!(LayerTag::default().to_string(), "stem");
    }
}
