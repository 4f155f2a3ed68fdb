//! Seeded minibatch training loop.
//!
//! Every iteration draws its batch, augmentations and sampling noise from a
//! generator keyed by `(seed, iteration)`, so a run resumed from a
//! checkpoint continues exactly as an uninterrupted one.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::augment::{augment_batch, DIHEDRAL_ORDER};
use super::checkpoint::Checkpoint;
use super::schedule::{adam_step, AdamState, TrainSchedule};
use super::VaeModel;
use crate::data::gaussian_blur_5x5;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub total: f64,
    pub mse: f64,
    pub sobel: f64,
    pub sigma_reg: f64,
    pub eta: f64,
    pub beta1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Blur training images with the 5x5 Gaussian before use.
    pub blur: bool,
    /// Configuration text embedded in checkpoints.
    pub config: String,
}

pub struct Trainer {
    model: VaeModel,
    adam: AdamState,
    images: Tensor,
    schedule: TrainSchedule,
    options: TrainOptions,
}

fn blur_all(images: &Tensor) -> Result<Tensor> {
    let &[n, 1, h, w] = images.shape() else {
        return Err(Error::dim("training images", "[N, 1, H, W]", format!("{:?}", images.shape())));
    };
    let mut out = images.clone();
    for i in 0..n {
        let img = Tensor::new(vec![h, w], images.row(i).to_vec())?;
        out.row_mut(i).copy_from_slice(gaussian_blur_5x5(&img)?.data());
    }
    Ok(out)
}

impl Trainer {
    /// `images` are preprocessed `[N, 1, H, W]` training examples.
    pub fn new(model: VaeModel, images: &Tensor, schedule: TrainSchedule, options: TrainOptions) -> Result<Self> {
        schedule.validate()?;
        if images.ndim() != 4 || images.shape()[1] != 1 {
            return Err(Error::dim("training images", "[N, 1, H, W]", format!("{:?}", images.shape())));
        }
        let images = if options.blur { blur_all(images)? } else { images.clone() };
        let adam = AdamState::zeros_like(&model.params());
        Ok(Self {
            model,
            adam,
            images,
            schedule,
            options,
        })
    }

    /// Continues from a checkpoint written by a run with the same configuration.
    pub fn resume(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        if checkpoint.config != self.options.config {
            return Err(Error::Checkpoint("checkpoint was written with a different configuration".into()));
        }
        self.adam = checkpoint.restore(&mut self.model)?;
        Ok(())
    }

    pub fn model(&self) -> &VaeModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut VaeModel {
        &mut self.model
    }

    pub fn into_model(self) -> VaeModel {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.model.iterations
    }

    pub fn is_finished(&self) -> bool {
        self.model.iterations >= self.schedule.iterations
    }

    fn batch(&self, t: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        rng.set_stream(t);
        let n = self.images.rows();
        let b = self.schedule.batch_size;
        let indices: Vec<usize> = if b <= n {
            rand::seq::index::sample(&mut rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        };
        let mut x = self.images.select_rows(&indices)?;
        let aug: Vec<usize> = (0..b).map(|_| rng.random_range(0..DIHEDRAL_ORDER)).collect();
        augment_batch(&mut x, &aug)?;
        let noise = Tensor::from_fn(&[b, self.model.latent()], |_| StandardNormal.sample(&mut rng));
        Ok((x, noise))
    }

    /// One optimizer step. On a non-finite loss or gradient the model is left
    /// at its previous parameters and a divergence error is returned.
    pub fn step(&mut self) -> Result<TraceRow> {
        let t = self.model.iterations + 1;
        if t > self.schedule.iterations {
            return Err(Error::State(format!("all {} iterations already run", self.schedule.iterations)));
        }
        let diverged = |reason: String| Error::Diverged { iteration: t, reason };
        let (x, noise) = self.batch(t)?;
        let out = self.model.forward_backward(&x, &noise).map_err(|e| match e {
            Error::NonFinite(r) => diverged(r),
            e => e,
        })?;
        if !out.terms.total.is_finite() {
            return Err(diverged(format!("loss is {}", out.terms.total)));
        }
        let mut params = self.model.params_mut();
        adam_step(&mut params, &mut self.adam, t, &self.schedule).map_err(|e| match e {
            Error::NonFinite(r) => diverged(r),
            e => e,
        })?;
        self.model.iterations = t;
        if let Some(path) = &self.options.checkpoint_path {
            let every = self.options.checkpoint_interval;
            if (every > 0 && t % every == 0) || t == self.schedule.iterations {
                Checkpoint::capture(&self.options.config, &self.model, &self.adam).write(path)?;
            }
        }
        Ok(TraceRow {
            iteration: t,
            total: out.terms.total,
            mse: out.terms.mse,
            sobel: out.terms.sobel,
            sigma_reg: out.terms.sigma_reg,
            eta: self.schedule.lr_at(t)?,
            beta1: self.schedule.beta1_at(t)?,
        })
    }

    pub fn run(&mut self) -> Result<Vec<TraceRow>> {
        let mut trace = Vec::new();
        while !self.is_finished() {
            let row = self.step()?;
            if row.iteration % 100 == 0 {
                log::debug!("iteration {} loss {:.6}", row.iteration, row.total);
            }
            trace.push(row);
        }
        Ok(trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.options.config, &self.model, &self.adam)
    }
}

/// Trains `model` for the full schedule and returns the trained model with
/// its loss trace.
pub fn train(
    model: VaeModel,
    images: &Tensor,
    schedule: TrainSchedule,
    options: TrainOptions,
) -> Result<(VaeModel, Vec<TraceRow>)> {
    let mut trainer = Trainer::new(model, images, schedule, options)?;
    let trace = trainer.run()?;
    Ok((trainer.into_model(), trace))
}

pub fn write_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
