use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, Level};
use crate::error::{ensure, Error, Result};
use crate::params::AdamConfig;
use crate::prior::{ConditionGrid, PriorConfig};
use crate::rejection::ClassifierConfig;

/// Settings of one stage's optimization loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// 0 disables periodic checkpoints (a final one is always written).
    #[serde(default)]
    pub checkpoint_interval: u64,
}

fn default_log_interval() -> u64 {
    50
}

/// Built-in seeded generator of checkerboards, gradients, stripes and discs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub val_count: usize,
    /// Seed of the generator, independent of the run seed so data stays fixed across runs.
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// A directory of PGM/PPM files or a raw `VQ2I` file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub val_path: Option<PathBuf>,
    #[serde(default)]
    pub val_labels: Option<PathBuf>,
    /// Used when `path` is absent.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Carve a 90/10 hash split out of the training data when no validation set is given.
    #[serde(default = "default_true")]
    pub holdout: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, labels: None, val_path: None, val_labels: None, synthetic: None, holdout: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub codec: CodecConfig,
    pub stage1: TrainingConfig,
    /// One entry per codec level, keyed by level name.
    pub priors: BTreeMap<Level, PriorConfig>,
    pub stage2: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Desk-scale defaults on 32×32 synthetic data.
    pub fn desk() -> Self {
        let mut priors = BTreeMap::new();
        priors.insert(Level::Top, PriorConfig::desk_top());
        priors.insert(Level::Bottom, PriorConfig::desk_bottom());
        Self {
            seed: 0,
            codec: CodecConfig::desk(),
            stage1: TrainingConfig {
                steps: 2000,
                batch_size: 32,
                optimizer: AdamConfig::default(),
                log_interval: 50,
                checkpoint_interval: 500,
            },
            priors,
            stage2: TrainingConfig {
                steps: 1000,
                batch_size: 32,
                optimizer: AdamConfig::default(),
                log_interval: 50,
                checkpoint_interval: 500,
            },
            data: DataConfig {
                synthetic: Some(SyntheticConfig { count: 256, num_classes: 8, val_count: 0, seed: 0 }),
                ..DataConfig::default()
            },
            classifier: None,
            output_dir: None,
        }
    }

    pub fn prior(&self, level: Level) -> Result<&PriorConfig> {
        self.priors.get(&level).ok_or_else(|| Error::Config(format!("no prior configured for level `{level}`")))
    }

    /// Class count shared by the class-conditional priors (0 when none are conditional).
    pub fn num_classes(&self) -> usize {
        self.priors.values().map(|p| p.num_classes).max().unwrap_or(0)
    }

    /// Cross-module consistency: every level has a prior whose grid and vocabulary match the
    /// codec, non-top priors are conditioned on exactly the level above, and the top is not.
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let levels = self.codec.level_names();
        for key in self.priors.keys() {
            ensure!(levels.contains(key), Config, "prior for level `{key}` but the codec has levels {levels:?}");
        }
        for (l, &level) in levels.iter().enumerate() {
            let p = self.prior(level)?;
            p.validate().map_err(|e| Error::Config(format!("prior `{level}`: {e}")))?;
            let g = self.codec.grid_size(l);
            ensure!(
                p.height == g && p.width == g,
                Config,
                "prior `{level}` grid {}×{} does not match codec grid {g}×{g}",
                p.height,
                p.width
            );
            let k = self.codec.levels[l].codebook_size;
            ensure!(
                p.num_codes == k,
                Config,
                "prior `{level}` vocabulary {} does not match codebook size {k}",
                p.num_codes
            );
            if l + 1 < levels.len() {
                let gu = self.codec.grid_size(l + 1);
                let expected = ConditionGrid { height: gu, width: gu, num_codes: self.codec.levels[l + 1].codebook_size };
                ensure!(
                    p.condition == Some(expected),
                    Config,
                    "prior `{level}` must be conditioned on the `{}` grid {gu}×{gu} with {} codes",
                    levels[l + 1],
                    expected.num_codes
                );
            } else {
                ensure!(p.condition.is_none(), Config, "the top prior cannot be conditioned on another level");
            }
        }
        let classes: Vec<usize> = self.priors.values().map(|p| p.num_classes).filter(|&c| c > 0).collect();
        ensure!(
            classes.windows(2).all(|w| w[0] == w[1]),
            Config,
            "class-conditional priors disagree on the class count: {classes:?}"
        );
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            ensure!(t.batch_size >= 1, Config, "{name}.batch_size must be ≥ 1");
            ensure!(t.log_interval >= 1, Config, "{name}.log_interval must be ≥ 1");
            ensure!(t.optimizer.lr > 0.0, Config, "{name}.optimizer.lr must be positive");
        }
        if let Some(c) = &self.classifier {
            ensure!(
                c.image_size == self.codec.image_size && c.channels == self.codec.channels,
                Config,
                "classifier input {}×{}×{} does not match the codec",
                c.channels,
                c.image_size,
                c.image_size
            );
            ensure!(c.num_classes >= 2, Config, "classifier needs at least 2 classes");
        }
        if let Some(s) = &self.data.synthetic {
            ensure!(s.num_classes >= 1, Config, "synthetic data needs at least one class");
            let n = self.num_classes();
            ensure!(
                n == 0 || s.num_classes <= n,
                Config,
                "synthetic data has {} classes but the priors know {n}",
                s.num_classes
            );
        }
        Ok(())
    }
}
