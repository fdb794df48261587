//! Datasets, metrics, experiment configuration and the evaluation protocol.

pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod mvtec;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::image::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Defective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Label,
    /// Ground truth, same size as `image`; absent for normal samples that were loaded without one.
    pub mask: Option<Mask>,
    pub category: String,
    pub split: Split,
    /// Path-like identifier, e.g. `test/scratch/003.png`.
    pub name: String,
}

impl Sample {
    pub fn is_defective(&self) -> bool {
        self.label == Label::Defective
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn train_images(&self) -> Vec<Image> {
        self.train.iter().map(|s| s.image.clone()).collect()
    }
}
