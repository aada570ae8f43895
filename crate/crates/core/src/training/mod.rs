//! Objective, optimiser and the epoch loop.

mod adam;
mod loss;

pub use adam::{adam_step, AdamState};
pub use loss::{compute_loss, cross_entropy_loss, truncated_l1_loss, LossKind, LossOutput};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{draw_noise, Model, NoiseConfig, NoiseRng};
use crate::pipeline::{extract_local_features, HierarchyStack};
use crate::tensors::FeatureTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub th_pos: f32,
    pub th_neg: f32,
    pub lr_adaptor: f32,
    pub lr_discriminator: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise: NoiseConfig,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            th_pos: 0.5,
            th_neg: -0.5,
            lr_adaptor: 1e-4,
            lr_discriminator: 2e-4,
            weight_decay: 1e-5,
            epochs: 160,
            batch_size: 4,
            noise: NoiseConfig::default(),
            loss_kind: LossKind::TruncatedL1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.th_pos > 0.0 && self.th_neg < 0.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy th_pos > 0 > th_neg, got {} / {}",
                self.th_pos, self.th_neg
            )));
        }
        if !(self.lr_adaptor > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        self.noise.validate()
    }
}

/// Mean loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model<f32>,
    pub trace: Vec<EpochRecord>,
}

/// Extracts local features once per sample, then trains on the cached maps.
pub fn train(
    samples: &[HierarchyStack],
    model: Model<f32>,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let features = samples
        .par_iter()
        .map(|s| extract_local_features(s, &model.pipeline))
        .collect::<Result<Vec<_>>>()?;
    train_on_features(&features, model, config, progress)
}

/// Stream used for the epoch shuffles; noise uses streams `0..steps`.
const SHUFFLE_STREAM: u64 = u64::MAX;

pub fn train_on_features(
    features: &[FeatureTensor],
    mut model: Model<f32>,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let c = model.channels();
    if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.channels() != c) {
        return Err(Error::Shape(format!(
            "training sample {i} has {} channels, model expects {c}",
            f.channels()
        )));
    }

    let mut adaptor_state = AdamState::for_params(&model.adaptor.params());
    let mut disc_state = AdamState::for_params(&model.discriminator.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let th_pos = config.th_pos;
    let th_neg = config.th_neg;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut step: u64 = 0;
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0f64;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let rows: usize = batch.iter().map(|&i| features[i].locations()).sum();
            let mut local = Vec::with_capacity(rows * c);
            for &i in batch {
                local.extend_from_slice(features[i].data());
            }
            let mut rng = NoiseRng::new(config.noise.seed, step);
            let noise = draw_noise::<f32>(rows * c, &config.noise, &mut rng)?;

            let fwd = model.forward_train(&local, rows, &noise)?;
            let loss = compute_loss(config.loss_kind, &fwd.pos, &fwd.neg, th_pos, th_neg)?;
            if !loss.loss.is_finite() {
                return Err(Error::Internal(format!(
                    "loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            let grads = model.backward(&fwd.cache, &loss.grad_pos, &loss.grad_neg)?;

            let variant = model.adaptor.variant();
            if model.adaptor.is_trainable() {
                adam_step(
                    &mut model.adaptor.params_mut(),
                    &grads.adaptor.tensors(variant),
                    &mut adaptor_state,
                    f64::from(config.lr_adaptor),
                    f64::from(config.weight_decay),
                )?;
            }
            adam_step(
                &mut model.discriminator.params_mut(),
                &grads.discriminator.tensors(),
                &mut disc_state,
                f64::from(config.lr_discriminator),
                f64::from(config.weight_decay),
            )?;

            loss_sum += loss.loss;
            batches += 1;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        progress(&record);
        trace.push(record);
    }

    model.finalize();
    Ok(Trained { model, trace })
}
