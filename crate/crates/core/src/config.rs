//! Declarative run configuration (TOML): the architecture section drives
//! model construction, the train/phase2 sections drive the two phases, and
//! the synthetic section parameterizes generated data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::train::ScheduleSegment;
use crate::tree::LabelTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrunkBlock {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        batch_norm: bool,
    },
    Pool {
        window: usize,
        /// Defaults to the window size.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
}

fn default_stride() -> usize {
    1
}

impl TrunkBlock {
    pub fn pool_stride(window: usize, stride: Option<usize>) -> usize {
        stride.unwrap_or(window)
    }
}

/// Architecture of both model variants: the conv trunk, one tap per tree
/// level, the common-width adapter dense layer, the per-branch FC stacks
/// (branched phase-1 model), and the shared FC stack (distilled model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Input image shape (channels, height, width).
    pub input_shape: [usize; 3],
    pub trunk: Vec<TrunkBlock>,
    /// Tap positions, 1-based counts of leading trunk blocks; one per level,
    /// strictly increasing.
    pub taps: Vec<usize>,
    /// Hidden units of the adapter dense layer, identical across branches.
    pub adapter_units: usize,
    /// Per-branch hidden sizes of the phase-1 FC stacks; empty means no
    /// hidden layers on any branch.
    #[serde(default)]
    pub branch_fc: Vec<Vec<usize>>,
    /// Hidden sizes of the shared FC stack in the distilled model.
    #[serde(default)]
    pub shared_fc: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.taps.len()
    }

    /// Branch stacks normalized to one (possibly empty) list per level.
    pub fn branch_stacks(&self) -> Vec<Vec<usize>> {
        if self.branch_fc.is_empty() {
            vec![Vec::new(); self.levels()]
        } else {
            self.branch_fc.clone()
        }
    }

    pub fn validate(&self, tree: &LabelTree) -> Result<()> {
        let levels = tree.levels();
        if self.taps.len() != levels {
            return Err(Error::Config(format!(
                "{} taps for a {}-level tree",
                self.taps.len(),
                levels
            )));
        }
        if self.adapter_units == 0 {
            return Err(Error::Config("adapter_units must be >= 1".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero dim",
                self.input_shape
            )));
        }
        let mut prev = 0usize;
        for &tap in &self.taps {
            if tap == 0 || tap > self.trunk.len() {
                return Err(Error::Config(format!(
                    "tap {tap} beyond trunk length {}",
                    self.trunk.len()
                )));
            }
            if tap <= prev {
                return Err(Error::Config(format!(
                    "taps must be strictly increasing, got {:?}",
                    self.taps
                )));
            }
            prev = tap;
        }
        if !self.branch_fc.is_empty() && self.branch_fc.len() != levels {
            return Err(Error::Config(format!(
                "branch_fc has {} stacks for {} levels",
                self.branch_fc.len(),
                levels
            )));
        }
        for (i, block) in self.trunk.iter().enumerate() {
            match block {
                TrunkBlock::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::Config(format!(
                            "trunk block {i}: conv sizes must be >= 1"
                        )));
                    }
                }
                TrunkBlock::Pool { window, stride } => {
                    if *window == 0 || stride.is_some_and(|s| s == 0) {
                        return Err(Error::Config(format!(
                            "trunk block {i}: pool sizes must be >= 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Phase-1 loss-weight schedule; when absent, a coarse-to-fine default
    /// is derived from the level count and epoch budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<ScheduleSegment>>,
    /// Fraction of the training data held out for per-epoch monitoring.
    pub val_fraction: f64,
    /// Random horizontal flip augmentation.
    pub hflip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 64,
            seed: 42,
            optimizer: OptimizerConfig::default(),
            schedule: None,
            val_fraction: 0.0,
            hflip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase2Section {
    /// Defaults to the phase-1 epoch budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Defaults to one tenth of the phase-1 learning rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Keep the adapter dense layers frozen alongside the trunk. On by
    /// default; turning it off is an experiment knob.
    pub freeze_adapters: bool,
}

impl Default for Phase2Section {
    fn default() -> Self {
        Phase2Section {
            epochs: None,
            lr: None,
            freeze_adapters: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub n_per_leaf: usize,
    pub test_per_leaf: usize,
    pub image: [usize; 3],
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_per_leaf: 500,
            test_per_leaf: 100,
            image: [1, 16, 16],
        }
    }
}

/// A whole config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub phase2: Phase2Section,
    #[serde(default)]
    pub synthetic: SyntheticSection,
}

impl FileConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        FileConfig::from_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Phase-2 learning rate: configured, or a tenth of phase 1's.
    pub fn phase2_lr(&self) -> f64 {
        self.phase2.lr.unwrap_or(self.train.optimizer.lr / 10.0)
    }

    pub fn phase2_epochs(&self) -> usize {
        self.phase2.epochs.unwrap_or(self.train.epochs)
    }
}
