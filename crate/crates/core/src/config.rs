//! Run configuration: a task preset plus JSON overrides.
//!
//! A config file names a `preset` and overrides any subset of its fields.
//! Objects merge key by key; everything else replaces the preset value.
//! Unknown keys are rejected.
//!
//! ```json
//! {
//!   "preset": "synthetic",
//!   "seed": 3,
//!   "train": {"max_epochs": 50},
//!   "data": {"train": "data/train", "val": "data/val"}
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::AnalysisConfig;
use crate::augment::{AugmentConfig, WarpConfig};
use crate::data::SyntheticTaskCfg;
use crate::error::{Error, Result};
use crate::nn::{Arch, ArchConfig};
use crate::optim::OptimConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Em,
    Liver,
    Prostate,
    Synthetic,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Dataset directory or manifest used for training.
    pub train: Option<PathBuf>,
    /// Fixed validation set; without it each member draws an 80/20 split.
    pub val: Option<PathBuf>,
    /// Images to predict or evaluate.
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSplits {
    pub train: SyntheticTaskCfg,
    pub val: SyntheticTaskCfg,
}

impl Default for SyntheticSplits {
    fn default() -> Self {
        Self {
            train: SyntheticTaskCfg {
                count: 8,
                seed: 1,
                split: Some("train".into()),
                ..SyntheticTaskCfg::default()
            },
            val: SyntheticTaskCfg {
                count: 4,
                seed: 2,
                split: Some("val".into()),
                ..SyntheticTaskCfg::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    /// Keep only the largest connected component per volume after predict.
    pub largest_component: bool,
    pub threshold: f64,
    /// 4, 8, 6 or 26; by default 26 for volumes and 8 for single slices.
    pub connectivity: Option<u32>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            largest_component: false,
            threshold: 0.5,
            connectivity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub arch: Arch,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub ensemble_size: usize,
    pub seed: u64,
    pub data: DataPaths,
    pub synthetic: SyntheticSplits,
    pub analysis: AnalysisConfig,
    pub postprocess: PostprocessConfig,
}

fn train_cfg(optim: OptimConfig, augment: Option<AugmentConfig>) -> TrainConfig {
    TrainConfig {
        optim,
        augment,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            preset: p,
            arch: Arch::Pipeline,
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            ensemble_size: 1,
            seed: 0,
            data: DataPaths::default(),
            synthetic: SyntheticSplits::default(),
            analysis: AnalysisConfig::default(),
            postprocess: PostprocessConfig::default(),
        };
        let warp = WarpConfig {
            enabled: true,
            ..WarpConfig::default()
        };
        match p {
            Preset::Em => Self {
                train: train_cfg(
                    OptimConfig {
                        batch_size: 8,
                        ..OptimConfig::default()
                    },
                    Some(AugmentConfig {
                        flip_h: true,
                        flip_v: true,
                        shear_max: 0.41,
                        rotation_max: 25.0,
                        crop_size: Some(256),
                        warp,
                        ..AugmentConfig::default()
                    }),
                ),
                ensemble_size: 10,
                ..base
            },
            Preset::Liver => Self {
                train: train_cfg(
                    OptimConfig {
                        weight_decay_fcn: 1e-4,
                        weight_decay_resnet: 5e-4,
                        batch_size: 20,
                        ..OptimConfig::default()
                    },
                    Some(AugmentConfig {
                        crop_size: Some(128),
                        crop_foreground: true,
                        ..AugmentConfig::default()
                    }),
                ),
                ..base
            },
            Preset::Prostate => Self {
                train: train_cfg(
                    OptimConfig {
                        lr0: 4e-4,
                        weight_decay_fcn: 1e-5,
                        weight_decay_resnet: 1e-5,
                        batch_size: 24,
                        ..OptimConfig::default()
                    },
                    Some(AugmentConfig {
                        shear_max: 0.1,
                        rotation_max: 10.0,
                        crop_size: Some(256),
                        warp,
                        ..AugmentConfig::default()
                    }),
                ),
                ensemble_size: 10,
                postprocess: PostprocessConfig {
                    largest_component: true,
                    ..PostprocessConfig::default()
                },
                ..base
            },
            Preset::Synthetic => Self {
                model: ArchConfig::with_scale(0.125),
                train: TrainConfig {
                    optim: OptimConfig {
                        lr0: 2e-3,
                        batch_size: 4,
                        ..OptimConfig::default()
                    },
                    max_epochs: 200,
                    augment: None,
                    ..TrainConfig::default()
                },
                ..base
            },
        }
    }

    /// Parses a config document. `base_dir` anchors relative data paths.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = &user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let preset = match map.get("preset") {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => Preset::Synthetic,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        let mut cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(dir) = base_dir {
            for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if !(self.model.scale > 0.0 && self.model.scale <= 1.0) {
            return Err(Error::Config(format!(
                "model.scale must lie in (0, 1], got {}",
                self.model.scale
            )));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.model.dropout
            )));
        }
        self.synthetic.train.validate()?;
        self.synthetic.val.validate()?;
        if self.analysis.bins == 0 {
            return Err(Error::Config("analysis.bins must be at least 1".into()));
        }
        let t = self.postprocess.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!(
                "postprocess.threshold must lie in (0, 1), got {t}"
            )));
        }
        if let Some(c) = self.postprocess.connectivity {
            crate::postprocess::Connectivity::from_count(c)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
