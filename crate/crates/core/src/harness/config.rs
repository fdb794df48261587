//! Experiment configuration: one TOML file with a section per stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly_map::FusionMode;
use crate::checkpoint::PretextScales;
use crate::encoder::{EncoderConfig, Scale, LARGE_PATCH, SMALL_PATCH};
use crate::error::{Error, Result};
use crate::memory::AffinityConfig;
use crate::training::TrainConfig;

use super::synthetic::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationPooling {
    /// Every pixel of every test image in one ranking.
    Pooled,
    /// Mean of per-image AUROCs over images whose mask has both classes.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Window stride when building the bank from training images.
    pub stride_large: usize,
    pub stride_small: usize,
    /// Keep at most this many rows per scale; 0 keeps all.
    pub max_rows: usize,
    pub subsample_seed: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            stride_large: 16,
            stride_small: 4,
            max_rows: 0,
            subsample_seed: 0,
        }
    }
}

impl MemoryConfig {
    pub fn stride(&self, scale: Scale) -> usize {
        match scale {
            Scale::Large64 => self.stride_large,
            Scale::Small32 => self.stride_small,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub affinity: AffinityConfig,
    /// Window stride when scoring test images.
    pub stride_large: usize,
    pub stride_small: usize,
    pub fusion: FusionMode,
    pub segmentation: SegmentationPooling,
    /// η values for the sweep; empty disables it.
    pub sweep_eta: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            affinity: AffinityConfig::default(),
            stride_large: 16,
            stride_small: 4,
            fusion: FusionMode::default(),
            segmentation: SegmentationPooling::Pooled,
            sweep_eta: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn stride(&self, scale: Scale) -> usize {
        match scale {
            Scale::Large64 => self.stride_large,
            Scale::Small32 => self.stride_small,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    /// Seed for the synthetic generator.
    pub data_seed: u64,
    pub encoder: EncoderConfig,
    pub pretext: PretextScales,
    pub training: TrainConfig,
    pub memory: MemoryConfig,
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    /// The small desk-scale setup: a narrower encoder and a shorter schedule.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.encoder.main_channels = [16, 32, 48, 48, 32, 32];
        cfg.encoder.norm_groups = 8;
        cfg.encoder.secondary_hidden = 64;
        cfg.encoder.head_hidden = 128;
        cfg.training.batch_size = 32;
        cfg.training.steps_per_epoch = 60;
        cfg.training.learning_rate = 3e-4;
        cfg.memory.stride_small = 8;
        cfg.evaluation.stride_small = 8;
        cfg.evaluation.sweep_eta = vec![1, 5, 10, 20, 50];
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical TOML rendering; equal configs hash equally
    /// regardless of key order or comments in the source file.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(hex::encode(digest))
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.encoder.validate()?;
        self.training.validate()?;
        self.evaluation.affinity.validate()?;
        if self.pretext.small.patch_size != SMALL_PATCH || self.pretext.large.patch_size != LARGE_PATCH {
            return Err(Error::Config(format!(
                "pretext patch sizes must be {SMALL_PATCH} and {LARGE_PATCH}, got {} and {}",
                self.pretext.small.patch_size, self.pretext.large.patch_size
            )));
        }
        self.pretext.small.validate()?;
        self.pretext.large.validate()?;
        for scale in Scale::ALL {
            if self.memory.stride(scale) == 0 || self.evaluation.stride(scale) == 0 {
                return Err(Error::Config(format!("stride for scale {scale} must be positive")));
            }
        }
        if self.evaluation.sweep_eta.contains(&0) {
            return Err(Error::Config("sweep_eta entries must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `a:b:step` (inclusive) into η values.
pub fn parse_eta_range(text: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad η range {text:?}: {s:?} is not a positive integer")))
    };
    let (start, end, step) = match parts.as_slice() {
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, s] => (num(a)?, num(b)?, num(s)?),
        _ => return Err(Error::Config(format!("bad η range {text:?}: expected a:b or a:b:step"))),
    };
    if start == 0 || step == 0 || end < start {
        return Err(Error::Config(format!("bad η range {text:?}: need 1 <= a <= b and step >= 1")));
    }
    Ok((start..=end).step_by(step).collect())
}
