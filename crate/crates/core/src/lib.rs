//! Anatomy-conditioned diffusion for radiotherapy dose prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: `f64` tensors with reverse-mode differentiation.
//! - [`optim`]: named parameter storage and Adam.
//! - [`diffusion`]: noise schedule, forward corruption, training objective and sampler.
//! - [`nn`]: windowed self-attention, cross-attention fusion, projector, time embedding.
//! - [`network`]: structure encoder and denoising network with configurable fusion.
//! - [`phantom`]: synthetic thorax-like cases with beam-model dose and their file format.
//! - [`metrics`]: Dose Score, DVH Score, homogeneity index, DVH curves, paired t-test.
//! - [`experiment`]: run configs, checkpoints, training loop and the command implementations.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod diffusion;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod tensor;

pub use diffusion::{DiffusionError, NoiseSchedule};
pub use optim::{OptimError, ParamStore};
pub use tensor::{backward, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] nn::ModelError),
    #[error(transparent)]
    Data(#[from] phantom::DataError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
