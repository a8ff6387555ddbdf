use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSeedContext;

/// A fixed-length watermark bit string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WatermarkPayload {
    bits: Vec<bool>,
}

impl WatermarkPayload {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Parses a string of `0`/`1` characters.
    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Parameter(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Uniformly random bits.
    pub fn random(len: usize, ctx: RandomSeedContext) -> Self {
        let mut rng = ctx.rng();
        Self {
            bits: (0..len).map(|_| rng.random::<bool>()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Entropy in bits of a uniformly drawn payload of this length.
    pub fn entropy(&self) -> f64 {
        self.bits.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Bits as ±1 signs (`true → +1`).
    pub fn signs(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }
}

impl std::fmt::Display for WatermarkPayload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}
