//! JSON run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::diffusion::ScheduleConfig;
use crate::metrics::MetricOptions;
use crate::network::ModelConfig;
use crate::phantom::DEFAULT_SPLIT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// One epoch is `ceil(train cases / batch size)` steps.
    pub epochs: usize,
    /// Fraction of total steps after which the learning rate decays
    /// linearly to zero.
    pub decay_start: f64,
    /// Steps between numbered checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 200,
            decay_start: 0.5,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of generated cases.
    pub count: usize,
    pub beams: usize,
    pub seed: u64,
    /// Train/validation/test proportions.
    pub split: [u32; 3],
    /// Where `gen-data` writes and the other commands read cases.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 32,
            beams: 5,
            seed: 0,
            split: DEFAULT_SPLIT,
            dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Clamp the sampled map to `[−1, 1]` before denormalizing.
    pub clamp: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { clamp: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::with_steps(100),
            optim: OptimConfig {
                epochs: 100,
                ..OptimConfig::default()
            },
            data: DataConfig::default(),
            sampling: SamplingConfig::default(),
            metrics: MetricOptions::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// 256×256 slices, T = 1000, 200 epochs, decay from epoch 100. Far too
    /// slow for continuous integration.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::paper_scale(),
            schedule: ScheduleConfig::with_steps(1000),
            optim: OptimConfig::default(),
            data: DataConfig {
                count: 320,
                ..DataConfig::default()
            },
            out_dir: PathBuf::from("runs/paper"),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.schedule.build().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optim.lr must be positive");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optim betas must lie in [0, 1) and eps must be positive");
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return bad("optim.batch_size and optim.epochs must be positive");
        }
        if !(0.0..=1.0).contains(&o.decay_start) {
            return bad("optim.decay_start is a fraction in [0, 1]");
        }
        if self.data.count == 0 || self.data.beams == 0 {
            return bad("data.count and data.beams must be positive");
        }
        if self.model.image_size < 16 {
            return bad("phantoms need model.image_size ≥ 16");
        }
        Ok(())
    }

    /// Training steps per epoch for `train_cases` examples.
    pub fn steps_per_epoch(&self, train_cases: usize) -> usize {
        train_cases.div_ceil(self.optim.batch_size).max(1)
    }

    pub fn total_steps(&self, train_cases: usize) -> usize {
        self.optim.epochs * self.steps_per_epoch(train_cases)
    }

    /// Constant until `decay_start · total`, then linear to zero at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let start = (self.optim.decay_start * total as f64).floor() as usize;
        if step < start || total <= start {
            self.optim.lr
        } else {
            self.optim.lr * (total - step.min(total)) as f64 / (total - start) as f64
        }
    }

    /// Whether two configs describe the same training trajectory. Output
    /// location and checkpoint cadence do not matter.
    pub fn same_training(&self, other: &Self) -> bool {
        let strip = |c: &Self| {
            let mut c = c.clone();
            c.out_dir = PathBuf::new();
            c.optim.checkpoint_every = 0;
            c.data.dir = PathBuf::new();
            c
        };
        strip(self) == strip(other)
    }
}
