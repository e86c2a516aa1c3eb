//! Pipeline configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSplit;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::ArchSpec;
use crate::pipeline::{OptimConfig, OptimizerKind, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teachers: TeachersConfig,
    pub arch: ArchSpec,
    pub generator: GeneratorConfig,
    pub loss: LossConfig,
    pub dual: DualConfig,
    pub branch: BranchConfig,
    pub finetune: FinetuneConfig,
    pub baseline: BaselineConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub labels: usize,
    /// Samples in the shifted-statistics set used by the similar-data baseline.
    pub similar_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeachersConfig {
    /// `Y_m` per teacher.
    pub label_sets: Vec<Vec<usize>>,
    /// `Y_cst`.
    pub customized: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub seed_channels: usize,
    /// Squeeze ratio of the teacher-level filters.
    pub filter_reduction: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

/// Declares a section holding one stage's iteration count, batch size and
/// optimiser, with its own defaults.
macro_rules! stage_section {
    ($(#[$doc:meta])* $name:ident, $iterations:expr) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub iterations: usize,
            pub batch_size: usize,
            pub optim: OptimConfig,
        }

        impl Default for $name {
            fn default() -> Self {
                $name {
                    iterations: $iterations,
                    batch_size: 16,
                    optim: OptimConfig::default(),
                }
            }
        }

        impl $name {
            pub fn schedule(&self) -> Schedule {
                Schedule {
                    iterations: self.iterations,
                    batch_size: self.batch_size,
                    optim: self.optim.clone(),
                }
            }
        }
    };
}

stage_section!(
    /// Step II; `iterations` is per block.
    DualConfig,
    1000
);
stage_section!(
    /// Collapsed-student baselines.
    BaselineConfig,
    750
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Trailing iterations averaged into each convergence value.
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Reuse one synthesized pool instead of fresh images per iteration.
    pub fixed_pool: bool,
    pub pool_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Step II iterations per block for each stream configuration.
    pub dual_iterations: usize,
    pub finetune_iterations: usize,
    /// Step I iterations for each generator of the discrete-loss comparison.
    pub generator_iterations: usize,
    /// Synthesized images scored for the output-entropy comparison.
    pub entropy_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    /// Worker threads for evaluation; forced to 1 in bit-exact mode.
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            dataset: DatasetConfig::default(),
            teachers: TeachersConfig::default(),
            arch: ArchSpec {
                widths: vec![8, 16, 32, 64],
                ..ArchSpec::default()
            },
            generator: GeneratorConfig::default(),
            loss: LossConfig::default(),
            dual: DualConfig::default(),
            branch: BranchConfig::default(),
            finetune: FinetuneConfig::default(),
            baseline: BaselineConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_samples: 2000,
            eval_samples: 500,
            labels: 12,
            similar_samples: 2000,
        }
    }
}

impl Default for TeachersConfig {
    fn default() -> Self {
        TeachersConfig {
            label_sets: vec![(0..7).collect(), (5..12).collect()],
            customized: (2..10).collect(),
            iterations: 1500,
            batch_size: 16,
            optim: OptimConfig::default(),
        }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 64,
            seed_channels: 64,
            filter_reduction: 4,
            iterations: 2000,
            batch_size: 16,
            optim: OptimConfig {
                kind: OptimizerKind::Adam,
                base_lr: 1e-3,
                ..OptimConfig::default()
            },
        }
    }
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig { window: 50 }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 500,
            batch_size: 16,
            optim: OptimConfig {
                base_lr: 1e-3,
                ..OptimConfig::default()
            },
            fixed_pool: false,
            pool_size: 512,
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dual_iterations: 100,
            finetune_iterations: 100,
            generator_iterations: 200,
            entropy_samples: 256,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_k: 3, threads: 1 }
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl Config {
    /// Keys missing from `text` keep their defaults, including keys inside
    /// partially given nested tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Config::default()).expect("config serializes");
        overlay(&mut merged, user);
        let cfg: Config = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.task_split()?;
        if self.arch.in_channels != 3 || self.arch.image_size != crate::data::dataset::IMAGE_SIZE {
            return Err(Error::Config("the synthetic dataset provides 3x32x32 images".into()));
        }
        for s in [self.teacher_schedule(), self.generator_schedule(), self.dual.schedule(), self.finetune_schedule(), self.baseline.schedule()] {
            s.validate()?;
        }
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        if self.generator.filter_reduction == 0 {
            return Err(Error::Config("generator.filter_reduction must be positive".into()));
        }
        if self.dual.iterations == 0 {
            return Err(Error::Config("dual.iterations must be positive".into()));
        }
        if !self.loss.lambda_m.is_empty() && self.loss.lambda_m.len() != self.teachers.label_sets.len() {
            return Err(Error::Config("loss.lambda_m needs one weight per teacher".into()));
        }
        Ok(())
    }

    pub fn task_split(&self) -> Result<TaskSplit> {
        let split = TaskSplit::new(self.teachers.label_sets.clone(), self.teachers.customized.clone(), self.dataset.labels)?;
        if let Some(m) = split.assignments().iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "teacher {} serves no customized label; drop it or extend the customized set",
                m + 1
            )));
        }
        Ok(split)
    }

    pub fn teacher_schedule(&self) -> Schedule {
        Schedule {
            iterations: self.teachers.iterations,
            batch_size: self.teachers.batch_size,
            optim: self.teachers.optim.clone(),
        }
    }

    pub fn generator_schedule(&self) -> Schedule {
        Schedule {
            iterations: self.generator.iterations,
            batch_size: self.generator.batch_size,
            optim: self.generator.optim.clone(),
        }
    }

    pub fn finetune_schedule(&self) -> Schedule {
        Schedule {
            iterations: self.finetune.iterations,
            batch_size: self.finetune.batch_size,
            optim: self.finetune.optim.clone(),
        }
    }
}
