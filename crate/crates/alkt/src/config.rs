//! TOML run configuration: dataset, model, schedule, training, seeds.
//!
//! All seeds are explicit — there is no wall-clock fallback — so a config
//! plus a repeat index fully determines a run. Repeat `i` shifts every base
//! seed by `i`.

use crate::datasets::{load_csv, load_idx, make_blobs, Dataset, Normalization};
use crate::distill::DistillConfig;
use crate::error::{AlktError, Result};
use crate::experiment::ExperimentConfig;
use crate::nets::{ArchConfig, ModelKind};
use crate::selection::{BudgetSchedule, Strategy};
use crate::uncertainty::UncertaintyMetric;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DatasetSpec {
    Blobs {
        per_class: Vec<usize>,
        dims: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
        num_classes: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_normalization")]
        normalization: Normalization,
    },
}

fn default_normalization() -> Normalization {
    Normalization::ZeroOne
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_model_kind")]
    pub kind: ModelKind,
    pub blocks: usize,
    pub width: usize,
    #[serde(default = "default_teacher_depth")]
    pub teacher_depth: usize,
    /// `[c,h,w]` for CNNs; ignored for MLPs (dims come from the dataset).
    #[serde(default)]
    pub input_shape: Vec<usize>,
}

fn default_model_kind() -> ModelKind {
    ModelKind::Mlp
}

fn default_teacher_depth() -> usize {
    2
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub strategy: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintySpec {
    #[serde(default = "default_metric")]
    pub metric: UncertaintyMetric,
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default = "default_mc_passes")]
    pub mc_passes: usize,
    #[serde(default = "default_mc_drop_prob")]
    pub mc_drop_prob: f64,
}

fn default_metric() -> UncertaintyMetric {
    UncertaintyMetric::KlPosterior
}

fn default_mc_passes() -> usize {
    10
}

fn default_mc_drop_prob() -> f64 {
    0.1
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec {
            metric: default_metric(),
            calibrate: false,
            mc_passes: default_mc_passes(),
            mc_drop_prob: default_mc_drop_prob(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: BudgetSchedule,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub uncertainty: UncertaintySpec,
    pub seeds: Seeds,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Proposed, Strategy::Random]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_repeat() -> usize {
    1
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| AlktError::parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeat == 0 {
            return Err(AlktError::invalid("repeat must be >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(AlktError::invalid("need at least one strategy"));
        }
        if self.model.blocks == 0 || self.model.width == 0 {
            return Err(AlktError::invalid("model blocks and width must be >= 1"));
        }
        self.schedule.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        self.load_dataset_for(0)
    }

    /// Dataset for repeat `index`, generated/split with the shifted data
    /// seed so each repeat's manifest reproduces its own dataset.
    pub fn load_dataset_for(&self, index: usize) -> Result<Dataset> {
        let seed = self.seeds.data.wrapping_add(index as u64);
        match &self.dataset {
            DatasetSpec::Blobs {
                per_class,
                dims,
                spread,
            } => make_blobs(per_class, *dims, *spread, seed),
            DatasetSpec::Csv { path, num_classes } => load_csv(path, *num_classes, seed),
            DatasetSpec::Idx {
                images,
                labels,
                normalization,
            } => load_idx(images, labels, *normalization, seed),
        }
    }

    /// Architecture derived from the model spec and the dataset shape.
    pub fn arch(&self, dataset: &Dataset) -> Result<ArchConfig> {
        let arch = match self.model.kind {
            ModelKind::Mlp => {
                let dims: usize = dataset.features().shape()[1..].iter().product();
                let mut a = ArchConfig::mlp(
                    self.model.blocks,
                    self.model.width,
                    dataset.num_classes,
                    dims,
                );
                a.teacher_depth = self.model.teacher_depth;
                a
            }
            ModelKind::Cnn => {
                let input_shape = if self.model.input_shape.len() == 3 {
                    self.model.input_shape.clone()
                } else {
                    dataset.features().shape()[1..].to_vec()
                };
                let mut a = ArchConfig::cnn(
                    vec![self.model.width; self.model.blocks],
                    dataset.num_classes,
                    input_shape,
                );
                a.teacher_depth = self.model.teacher_depth;
                a
            }
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Experiment config for repeat `index`; every base seed shifts by the
    /// repeat index.
    pub fn experiment_config(&self, dataset: &Dataset, index: usize) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::new(self.arch(dataset)?);
        cfg.schedule = self.schedule;
        cfg.distill = self.distill.clone();
        cfg.metric = self.uncertainty.metric;
        cfg.calibrate = self.uncertainty.calibrate;
        cfg.mc_passes = self.uncertainty.mc_passes;
        cfg.mc_drop_prob = self.uncertainty.mc_drop_prob;
        cfg.data_seed = self.seeds.data.wrapping_add(index as u64);
        cfg.init_seed = self.seeds.init.wrapping_add(index as u64);
        cfg.strategy_seed = self.seeds.strategy.wrapping_add(index as u64);
        cfg.threads = threads_from_env();
        Ok(cfg)
    }
}

/// Worker cap from `ALKT_THREADS`; defaults to 1 for determinism.
pub fn threads_from_env() -> usize {
    std::env::var("ALKT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        strategies = ["proposed", "random"]
        out_dir = "runs/blobs"
        repeat = 2

        [dataset]
        kind = "blobs"
        per_class = [50, 50, 50, 50]
        dims = 2
        spread = 0.45

        [model]
        blocks = 2
        width = 16

        [schedule]
        initial_fraction = 0.10
        final_fraction = 0.40
        step = 0.05

        [distill]
        lambda = 100.0
        transfer_metric = "attention"
        epochs = 5
        batch_size = 16

        [distill.sgd]
        learning_rate = 0.1
        momentum = 0.9
        weight_decay = 0.0005
        decay_epoch_fraction = 0.8
        decay_factor = 0.1

        [uncertainty]
        metric = "kl-posterior"
        calibrate = false

        [seeds]
        data = 1
        init = 2
        strategy = 3
    "#;

    #[test]
    fn parses_and_validates_sample() {
        let cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.repeat, 2);
        assert_eq!(cfg.strategies, vec![Strategy::Proposed, Strategy::Random]);
        let data = cfg.load_dataset().unwrap();
        assert_eq!(data.len(), 200);
        let exp = cfg.experiment_config(&data, 1).unwrap();
        assert_eq!(exp.data_seed, 2);
        assert_eq!(exp.init_seed, 3);
        assert_eq!(exp.strategy_seed, 4);
        assert_eq!(exp.arch.input_shape, vec![2]);
        assert_eq!(exp.arch.num_classes, 4);
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let minimal = r#"
            [dataset]
            kind = "blobs"
            per_class = [10, 10]
            dims = 2
            spread = 0.2

            [model]
            blocks = 1
            width = 4

            [seeds]
            data = 1
            init = 1
            strategy = 1
        "#;
        let cfg: RunConfig = toml::from_str(minimal).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.repeat, 1);
        assert_eq!(cfg.schedule.budget_points().len(), 7);
        assert_eq!(cfg.distill.lambda, 100.0);
    }

    #[test]
    fn bad_config_is_rejected() {
        let bad = SAMPLE.replace("repeat = 2", "repeat = 0");
        let cfg: RunConfig = toml::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
        assert!(toml::from_str::<RunConfig>("not toml at all [").is_err());
    }
}
