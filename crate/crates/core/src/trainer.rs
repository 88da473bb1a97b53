//! Optimisation loop: per-sequence diffusion training steps, validation with
//! a fixed timestep seed, checkpointing and the training log.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointConfig, OptimizerState, RngState};
use crate::decoder::{DataKind, FaceModel};
use crate::diffusion::{noise_with, standard_normal, LossKind, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Graph, Mat};
use crate::seed::derive_seed;

/// One aligned training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    /// `N x F` speech features aligned to the motion frames.
    pub audio: Mat,
    /// `N x D` clean motion.
    pub motion: Mat,
    pub style: Option<usize>,
}

impl TrainingExample {
    pub fn n_frames(&self) -> usize {
        self.motion.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    /// Sequences per optimizer step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Group sequences of similar length into the same batch.
    #[serde(default)]
    pub length_bucketing: bool,
    /// Seed of the timestep draws used for validation loss.
    #[serde(default = "default_val_seed")]
    pub validation_seed: u64,
    #[serde(default = "default_device")]
    pub device: String,
}

fn default_optimizer() -> String {
    "adam".into()
}

fn default_lr() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    1
}

fn default_val_seed() -> u64 {
    0x5eed
}

fn default_device() -> String {
    "cpu".into()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            epochs: 1,
            batch_size: 1,
            length_bucketing: false,
            validation_seed: default_val_seed(),
            device: default_device(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "adam" {
            return Err(Error::Config(format!("train.optimizer `{}` unsupported (only `adam`)", self.optimizer)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.device != "cpu" {
            log::warn!("device hint `{}` ignored; training runs on the CPU", self.device);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_val: Option<f64>,
    pub last_train_loss: Option<f64>,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

pub struct Trainer {
    config: CheckpointConfig,
    train: TrainConfig,
    model: FaceModel,
    optimizer: Adam,
    schedule: NoiseSchedule,
    loss: LossKind,
    state: TrainState,
    rng: ChaCha8Rng,
    rig_range: Option<(Vec<f64>, Vec<f64>)>,
}

impl Trainer {
    /// Fresh model and optimizer; every random draw derives from `seed`.
    pub fn new(config: CheckpointConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        let model = FaceModel::new(config.model.clone(), derive_seed(seed, "init"))?;
        let schedule = config.diffusion.schedule()?;
        let optimizer = Adam::new(train.learning_rate, model.parameters());
        Ok(Self {
            loss: config.diffusion.loss,
            config,
            train,
            model,
            optimizer,
            schedule,
            state: TrainState::default(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "train")),
            rig_range: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let config = ck.config()?;
        let model = FaceModel::from_parameters(config.model.clone(), ck.params.clone())?;
        let mut optimizer = match &ck.optimizer {
            Some(o) => o.restore(model.parameters())?,
            None => return Err(Error::Checkpoint("checkpoint has no optimizer state to resume from".into())),
        };
        optimizer.lr = train.learning_rate;
        Ok(Self {
            schedule: config.diffusion.schedule()?,
            loss: config.diffusion.loss,
            config,
            train,
            model,
            optimizer,
            state: TrainState {
                epoch: ck.epoch as usize,
                step: ck.step,
                best_val: ck.best_val,
                last_train_loss: None,
            },
            rng: ck.rng.restore(),
            rig_range: ck.rig_range.clone(),
        })
    }

    pub fn model(&self) -> &FaceModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.optimizer
    }

    pub fn config(&self) -> &CheckpointConfig {
        &self.config
    }

    fn check_example(&self, ex: &TrainingExample) -> Result<()> {
        let m = self.model.config();
        if ex.audio.nrows() != ex.motion.nrows() || ex.audio.ncols() != m.audio_dim || ex.motion.ncols() != m.output_dim {
            return Err(Error::Contract(format!(
                "example {} has audio {:?} and motion {:?}; model expects N x {} and N x {}",
                ex.id,
                ex.audio.dim(),
                ex.motion.dim(),
                m.audio_dim,
                m.output_dim
            )));
        }
        Ok(())
    }

    /// One optimizer step on `batch`; returns the mean loss over the batch.
    pub fn train_step(&mut self, batch: &[&TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total = Gradients::zeros_like(self.model.parameters());
        let mut loss_sum = 0.0;
        for ex in batch {
            self.check_example(ex)?;
            let t = self.rng.random_range(1..=self.schedule.steps());
            let eps = standard_normal(ex.motion.dim(), &mut self.rng);
            let x_t = noise_with(&ex.motion, &eps, self.schedule.alpha_bar(t)?);
            let mut g = Graph::new();
            let loss = self.model.loss(
                &mut g,
                &ex.audio,
                &x_t,
                t,
                ex.style,
                &ex.motion,
                self.loss,
                Some(&mut self.rng as &mut dyn RngCore),
            )?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NumericDivergence {
                    location: format!("training step {}", self.state.step + 1),
                    detail: format!(
                        "loss {value} on sequence {} at t={t} (epoch {}, lr {})",
                        ex.id, self.state.epoch, self.optimizer.lr
                    ),
                });
            }
            loss_sum += value;
            total.accumulate(g.backward(loss, self.model.parameters().len()));
        }
        total.scale(1.0 / batch.len() as f64);
        self.optimizer.step(self.model.parameters_mut(), &total);
        self.state.step += 1;
        Ok(loss_sum / batch.len() as f64)
    }

    fn batches(&mut self, n: usize, lengths: &[usize]) -> Vec<Vec<usize>> {
        let bs = self.train.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<usize>> = if self.train.length_bucketing {
            order.sort_by_key(|&i| lengths[i]);
            order.chunks(bs).map(<[usize]>::to_vec).collect()
        } else {
            order.chunks(bs).map(<[usize]>::to_vec).collect()
        };
        if self.train.length_bucketing {
            batches.shuffle(&mut self.rng);
        }
        batches
    }

    /// One pass over `data`; returns the mean per-step loss.
    pub fn run_epoch(&mut self, data: &[TrainingExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let lengths: Vec<usize> = data.iter().map(TrainingExample::n_frames).collect();
        let batches = self.batches(data.len(), &lengths);
        let mut sum = 0.0;
        for b in &batches {
            let refs: Vec<&TrainingExample> = b.iter().map(|&i| &data[i]).collect();
            sum += self.train_step(&refs)?;
        }
        self.state.epoch += 1;
        let mean = sum / batches.len() as f64;
        self.state.last_train_loss = Some(mean);
        Ok(mean)
    }

    pub fn evaluate(&self, data: &[TrainingExample]) -> Result<f64> {
        evaluate_loss(&self.model, &self.schedule, self.loss, data, self.train.validation_seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(&self.config, self.model.parameters().clone(), RngState::capture(&self.rng));
        ck.epoch = self.state.epoch as u64;
        ck.step = self.state.step;
        ck.best_val = self.state.best_val;
        ck.rig_range = self.rig_range.clone();
        ck.optimizer = Some(OptimizerState::capture(&self.optimizer));
        ck
    }

    fn observe_range(&mut self, data: &[TrainingExample]) {
        if self.config.model.decoder.kind != DataKind::Rig || self.rig_range.is_some() {
            return;
        }
        let d = self.config.model.output_dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for ex in data {
            for row in ex.motion.rows() {
                for (j, &v) in row.iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        self.rig_range = Some((lo, hi));
    }

    /// Trains until `train.epochs` epochs are complete. With `out_dir` set,
    /// writes `last.ckpt`, `best.ckpt` and appends to `train_log.csv`.
    /// Validation falls back to the training set when `val` is empty.
    pub fn fit(&mut self, train: &[TrainingExample], val: &[TrainingExample], out_dir: Option<&Path>) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        self.observe_range(train);
        let val = if val.is_empty() { train } else { val };
        let start = Instant::now();
        let mut logs = Vec::new();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        while self.state.epoch < self.train.epochs {
            let train_loss = self.run_epoch(train)?;
            let val_loss = self.evaluate(val)?;
            let row = EpochLog {
                epoch: self.state.epoch,
                step: self.state.step,
                train_loss,
                val_loss,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            info!(
                "epoch {} step {} train {:.6} val {:.6}",
                row.epoch, row.step, row.train_loss, row.val_loss
            );
            let improved = self.state.best_val.is_none_or(|b| val_loss < b);
            if improved {
                self.state.best_val = Some(val_loss);
            }
            if let Some(dir) = out_dir {
                append_log(&dir.join("train_log.csv"), &row)?;
                let ck = self.checkpoint();
                ck.save(&dir.join("last.ckpt"))?;
                if improved {
                    ck.save(&dir.join("best.ckpt"))?;
                }
            }
            logs.push(row);
        }
        Ok(logs)
    }

    pub fn into_model(self) -> FaceModel {
        self.model
    }
}

fn append_log(path: &Path, row: &EpochLog) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.flush()?;
    Ok(())
}

/// Mean loss over `data` with timesteps and noise drawn from `seed`, so
/// repeated calls on the same parameters agree exactly.
pub fn evaluate_loss(
    model: &FaceModel,
    schedule: &NoiseSchedule,
    kind: LossKind,
    data: &[TrainingExample],
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate loss on an empty subset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for ex in data {
        let t = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(ex.motion.dim(), &mut rng);
        let x_t = noise_with(&ex.motion, &eps, schedule.alpha_bar(t)?);
        let mut g = Graph::new();
        let l = model.loss(&mut g, &ex.audio, &x_t, t, ex.style, &ex.motion, kind, None)?;
        sum += g.scalar(l);
    }
    Ok(sum / data.len() as f64)
}

#[cfg(test)]
mod tests;
