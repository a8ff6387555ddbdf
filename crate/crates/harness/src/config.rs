//! Experiment configuration, loaded from TOML, with a content fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use leakmark::attacks::{AttackConfig, BaselineKind};
use leakmark::codecs::{DwtDct, DwtDctSvd, LearnableCodec, LearnableCodecState, WatermarkCodec, DEFAULT_QIM_STEP};
use leakmark::metrics::DetectionRule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Working image side used when the config does not set one.
pub const DEFAULT_IMAGE_SIZE: usize = 128;

/// Where a corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// A directory of PNG/JPEG files.
    Dir { path: PathBuf },
    /// Procedurally generated natural-looking images.
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Images that get watermarked and attacked.
    pub source: CorpusSource,
    /// Clean forgery targets; required when a forgery attack is configured.
    #[serde(default)]
    pub target: Option<CorpusSource>,
    pub count: usize,
}

fn default_payload_length() -> usize {
    32
}

fn default_qim_step() -> f64 {
    DEFAULT_QIM_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecSpec {
    Dwtdct {
        #[serde(default = "default_payload_length")]
        payload_length: usize,
        #[serde(default = "default_qim_step")]
        strength: f64,
    },
    Dwtdctsvd {
        #[serde(default = "default_payload_length")]
        payload_length: usize,
        #[serde(default = "default_qim_step")]
        strength: f64,
    },
    /// A trained state file written by `train-codec`.
    Learnable { state: PathBuf },
}

impl CodecSpec {
    pub fn build(&self) -> Result<Box<dyn WatermarkCodec>> {
        Ok(match self {
            CodecSpec::Dwtdct {
                payload_length,
                strength,
            } => Box::new(DwtDct::new(*payload_length, *strength)),
            CodecSpec::Dwtdctsvd {
                payload_length,
                strength,
            } => Box::new(DwtDctSvd::new(*payload_length, *strength)),
            CodecSpec::Learnable { state } => Box::new(LearnableCodec::new(LearnableCodecState::load(state)?)?),
        })
    }

    /// Parses `dwtdct`, `dwtdctsvd` or `learnable` (which needs `state`).
    pub fn from_name(name: &str, state: Option<&Path>) -> Result<Self> {
        match (name, state) {
            ("dwtdct", _) => Ok(CodecSpec::Dwtdct {
                payload_length: default_payload_length(),
                strength: DEFAULT_QIM_STEP,
            }),
            ("dwtdctsvd", _) => Ok(CodecSpec::Dwtdctsvd {
                payload_length: default_payload_length(),
                strength: DEFAULT_QIM_STEP,
            }),
            ("learnable", Some(p)) => Ok(CodecSpec::Learnable { state: p.to_path_buf() }),
            ("learnable", None) => Err(HarnessError::Config("the learnable codec needs a state file".into())),
            (other, _) => Err(HarnessError::Config(format!(
                "unknown codec {other:?} (expected dwtdct, dwtdctsvd or learnable)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    /// Feature-space evasion.
    Evade {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        config: AttackConfig,
    },
    /// Two-stage forgery; records both the Stage I and Stage I+II images.
    Forge {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        config: AttackConfig,
    },
    /// Forgery by Stage II alone.
    ForgeOnlyStage2 {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        config: AttackConfig,
    },
    Baseline {
        #[serde(default)]
        name: Option<String>,
        baseline: BaselineKind,
    },
}

impl AttackSpec {
    /// Label used in records and reports.
    pub fn label(&self) -> String {
        match self {
            AttackSpec::Evade { name, .. } => name.clone().unwrap_or_else(|| "dapao".into()),
            AttackSpec::Forge { name, .. } => name.clone().unwrap_or_else(|| "forge".into()),
            AttackSpec::ForgeOnlyStage2 { name, .. } => name.clone().unwrap_or_else(|| "forge-only-stage2".into()),
            AttackSpec::Baseline { name, baseline } => name
                .clone()
                .unwrap_or_else(|| format!("{}-{}", baseline.name(), baseline.intensity())),
        }
    }

    pub fn is_forgery(&self) -> bool {
        matches!(self, AttackSpec::Forge { .. } | AttackSpec::ForgeOnlyStage2 { .. })
    }

    pub fn attack_config_mut(&mut self) -> Option<&mut AttackConfig> {
        match self {
            AttackSpec::Evade { config, .. }
            | AttackSpec::Forge { config, .. }
            | AttackSpec::ForgeOnlyStage2 { config, .. } => Some(config),
            AttackSpec::Baseline { .. } => None,
        }
    }

    pub fn attack_config(&self) -> Option<&AttackConfig> {
        match self {
            AttackSpec::Evade { config, .. }
            | AttackSpec::Forge { config, .. }
            | AttackSpec::ForgeOnlyStage2 { config, .. } => Some(config),
            AttackSpec::Baseline { .. } => None,
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_image_size() -> usize {
    DEFAULT_IMAGE_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub corpus: CorpusConfig,
    pub codecs: Vec<CodecSpec>,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub detection: DetectionRule,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = toml::from_str(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.codecs.is_empty() {
            return bad("no codecs configured".into());
        }
        if self.attacks.is_empty() {
            return bad("no attacks configured".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.image_size < leakmark::image::MIN_ATTACK_SIDE {
            return bad(format!(
                "image size {} is below the {} minimum",
                self.image_size,
                leakmark::image::MIN_ATTACK_SIDE
            ));
        }
        let mut labels: Vec<String> = self.attacks.iter().map(AttackSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate attack label {:?}", w[0]));
        }
        for a in &self.attacks {
            if let Some(c) = a.attack_config() {
                c.validate()?;
            }
        }
        self.detection.validate()?;
        if self.attacks.iter().any(AttackSpec::is_forgery) {
            match &self.corpus.target {
                None => return bad("forgery attacks need a corpus.target set".into()),
                Some(t) if *t == self.corpus.source => {
                    return bad("corpus.source and corpus.target must be disjoint".into())
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn records_path(&self) -> PathBuf {
        self.output_dir.join("records.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seed = 7
output_dir = "out"

[corpus]
count = 2
source = { synthetic = { seed = 1 } }
target = { synthetic = { seed = 2 } }

[[codecs]]
kind = "dwtdctsvd"

[[attacks]]
kind = "evade"
config = { epsilon = 0.04, steps = 5 }

[[attacks]]
kind = "baseline"
baseline = { Jpeg = { quality = 50 } }

[[attacks]]
kind = "forge"
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.image_size, DEFAULT_IMAGE_SIZE);
        assert_eq!(c.workers, 1);
        let AttackSpec::Evade { config, .. } = &c.attacks[0] else { panic!() };
        assert_eq!(config.steps, 5);
        assert_eq!(config.learning_rate, AttackConfig::default().learning_rate);
        assert_eq!(c.attacks[1].label(), "jpeg-50");
        assert_eq!(
            c.codecs[0],
            CodecSpec::Dwtdctsvd {
                payload_length: 32,
                strength: DEFAULT_QIM_STEP
            }
        );
    }

    #[test]
    fn toml_round_trip_keeps_fingerprint() {
        let c: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        let back: ExperimentConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let c: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        let base = c.fingerprint();
        let mut variants = Vec::new();
        let mut v = c.clone();
        v.seed += 1;
        variants.push(v);
        let mut v = c.clone();
        v.workers = 2;
        variants.push(v);
        let mut v = c.clone();
        v.image_size = 96;
        variants.push(v);
        let mut v = c.clone();
        v.corpus.count = 3;
        variants.push(v);
        let mut v = c.clone();
        v.output_dir = "elsewhere".into();
        variants.push(v);
        let mut v = c.clone();
        v.attacks[0].attack_config_mut().unwrap().epsilon = 0.05;
        variants.push(v);
        let mut v = c.clone();
        v.detection.pvalue_alpha = 0.01;
        variants.push(v);
        let mut v = c.clone();
        v.codecs[0] = CodecSpec::Dwtdct {
            payload_length: 32,
            strength: DEFAULT_QIM_STEP,
        };
        variants.push(v);
        for v in variants {
            assert_ne!(v.fingerprint(), base);
        }
    }

    #[test]
    fn validation_errors() {
        let mut c: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        c.corpus.target = Some(c.corpus.source.clone());
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        c.corpus.target = None;
        assert!(c.validate().is_err());
        let mut c: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        c.attacks.push(c.attacks[0].clone());
        assert!(c.validate().is_err());
        let mut c: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        c.attacks[0].attack_config_mut().unwrap().epsilon = 0.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn codec_names() {
        assert!(CodecSpec::from_name("dwtdct", None).is_ok());
        assert!(CodecSpec::from_name("learnable", None).is_err());
        assert!(CodecSpec::from_name("stegastamp", None).is_err());
    }
}
