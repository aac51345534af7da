//! In-memory training loop with bit-exact resume.
//!
//! Randomness comes from two places. Parameter initialization uses ChaCha8
//! seeded with the run seed on stream 0. Timestep and noise draws use the
//! same seed on stream 1, and that generator's position is checkpointed.
//! Batches are a pure function of the step: the example stream is the
//! concatenation of per-pass shuffles of the training set, so a batch of 8
//! drawn from 4 cases visits each case twice.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::{ExperimentError, RunConfig};
use crate::diffusion::{training_step, NoiseSchedule, TrainingPair};
use crate::network::{build_model, DoseNet};
use crate::optim::{AdamConfig, ParamStore};
use crate::phantom::case_seed;
use crate::tensor::backward;

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// Zero-based index of the step just taken.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct Trainer {
    config: RunConfig,
    store: ParamStore,
    rng: ChaCha8Rng,
    step: usize,
    data: Vec<TrainingPair>,
    schedule: NoiseSchedule,
}

const TRAIN_STREAM: u64 = 1;
const SHUFFLE_SALT: u64 = 0x7368_7566;

impl Trainer {
    pub fn new(config: RunConfig, data: Vec<TrainingPair>) -> Result<Self, ExperimentError> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let store = build_model(&config.model, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Self::assemble(config, store, rng, 0, data)
    }

    /// Continues from `ck`. `config` must describe the same training run.
    pub fn resume(config: RunConfig, ck: Checkpoint, data: Vec<TrainingPair>) -> Result<Self, ExperimentError> {
        if !config.same_training(&ck.config) {
            return Err(ExperimentError::Config(
                "checkpoint was written by a different run configuration".into(),
            ));
        }
        Self::assemble(config, ck.params, ck.rng.restore(), ck.step as usize, data)
    }

    fn assemble(
        config: RunConfig,
        store: ParamStore,
        rng: ChaCha8Rng,
        step: usize,
        data: Vec<TrainingPair>,
    ) -> Result<Self, ExperimentError> {
        if data.is_empty() {
            return Err(ExperimentError::Data("no training cases".into()));
        }
        let h = config.model.image_size;
        let want = [config.model.condition_channels(), h, h];
        for (i, p) in data.iter().enumerate() {
            if p.condition.shape() != want || p.x0.shape() != [1, h, h] {
                return Err(ExperimentError::Data(format!(
                    "training case {i} has condition {:?} and dose {:?}, model expects {want:?} and [1, {h}, {h}]",
                    p.condition.shape(),
                    p.x0.shape()
                )));
            }
        }
        let schedule = config.schedule.build()?;
        Ok(Self {
            config,
            store,
            rng,
            step,
            data,
            schedule,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.data.len())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Training-set indices used at `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let b = self.config.optim.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|p| {
                let pass = p / n;
                if cached.as_ref().map(|c| c.0) != Some(pass) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(case_seed(self.config.seed ^ SHUFFLE_SALT, pass)));
                    cached = Some((pass, perm));
                }
                cached.as_ref().unwrap().1[p % n]
            })
            .collect()
    }

    /// One optimizer step. A non-finite loss aborts before any update.
    pub fn train_step(&mut self) -> Result<StepLog, ExperimentError> {
        let step = self.step;
        let batch: Vec<TrainingPair> = self.batch_indices(step).into_iter().map(|i| self.data[i].clone()).collect();
        let net = DoseNet::new(&self.config.model, &self.store, true)?;
        let loss = training_step(&net, &batch, &self.schedule, &mut self.rng)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(ExperimentError::NonFinite { step });
        }
        let grads = backward(&loss)?;
        let lr = self.config.lr_at(step, self.total_steps());
        let o = &self.config.optim;
        let adam = AdamConfig {
            lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        };
        self.store.adam_step(&grads, &adam)?;
        self.step += 1;
        Ok(StepLog { step, loss: value, lr })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            rng: RngState::capture(&self.rng),
            params: self.store.clone(),
        }
    }

    pub fn into_params(self) -> ParamStore {
        self.store
    }
}
