//! Run configuration, checkpoints, the training loop and the command
//! implementations behind the `dosediff` binary.
//!
//! Every command is deterministic in `(config, seed)`: rerunning it writes
//! byte-identical files. Wall-clock timings are kept out of the
//! deterministic outputs.

mod checkpoint;
mod commands;
mod config;
pub mod render;
mod train;

use std::path::PathBuf;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_sample, cmd_train, fusion_ablation_matrix, load_cases, load_manifest,
    sample_dose, schedule_csv, AblationRow, EvalOptions, EvalSummary, Manifest, SampleOptions, TrainOptions,
    TrainSummary, ABLATION_CSV_HEADER, LOSS_CSV_HEADER,
};
pub use config::{DataConfig, OptimConfig, RunConfig, SamplingConfig};
pub use train::{StepLog, Trainer};

use crate::diffusion::DiffusionError;
use crate::metrics::MetricsError;
use crate::nn::ModelError;
use crate::optim::OptimError;
use crate::phantom::DataError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Lib(#[from] crate::Error),
}

impl ExperimentError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric failure, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) | ExperimentError::Checkpoint(_) | ExperimentError::Io { .. } => 3,
            ExperimentError::NonFinite { .. } => 4,
            ExperimentError::Lib(e) => match e {
                crate::Error::Model(ModelError::InvalidConfig(_)) => 2,
                crate::Error::Diffusion(DiffusionError::InvalidSchedule(_)) => 2,
                crate::Error::Data(_) | crate::Error::Metrics(_) => 3,
                crate::Error::Model(ModelError::Shape(_)) => 3,
                _ => 1,
            },
        }
    }
}

macro_rules! via_lib {
    ($($t:ty),*) => {$(
        impl From<$t> for ExperimentError {
            fn from(e: $t) -> Self {
                ExperimentError::Lib(e.into())
            }
        }
    )*};
}

via_lib!(TensorError, DiffusionError, OptimError, ModelError, DataError, MetricsError);
