//! The trainable head: feature adaptor, anomalous-feature generator and
//! discriminator, with explicit forward and backward passes.

mod adaptor;
mod discriminator;
mod noise;

pub use adaptor::{Adaptor, AdaptorCache, AdaptorGrads, AdaptorVariant};
pub use discriminator::{Discriminator, DiscriminatorCache, DiscriminatorGrads, Mode};
pub use noise::{draw_noise, generate_anomalous, NoiseConfig, NoiseRng};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::pipeline::PipelineConfig;

/// Pipeline settings plus trained head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub pipeline: PipelineConfig,
    pub adaptor: Adaptor<T>,
    pub discriminator: Discriminator<T>,
    finalized: bool,
}

/// Caches of one training forward over `[q; q + eps]`.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    rows: usize,
    adaptor: AdaptorCache<T>,
    discriminator: DiscriminatorCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub adaptor: AdaptorGrads<T>,
    pub discriminator: DiscriminatorGrads<T>,
}

/// Output of [`Model::forward_train`].
#[derive(Debug, Clone)]
pub struct TrainForward<T> {
    /// `D(q)` for the normal features.
    pub pos: Vec<T>,
    /// `D(q + eps)` for the synthesised anomalies.
    pub neg: Vec<T>,
    pub cache: HeadCache<T>,
}

impl<T: Real> Model<T> {
    /// Fresh model. The discriminator initialisation is drawn from `seed`.
    pub fn new(
        pipeline: PipelineConfig,
        variant: AdaptorVariant,
        channels: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        pipeline.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            pipeline,
            adaptor: Adaptor::new(variant, channels),
            discriminator: Discriminator::new(channels, hidden, &mut rng)?,
            finalized: false,
        })
    }

    pub fn from_parts(
        pipeline: PipelineConfig,
        adaptor: Adaptor<T>,
        discriminator: Discriminator<T>,
        finalized: bool,
    ) -> Result<Self> {
        pipeline.validate()?;
        discriminator.validate()?;
        if adaptor.channels() != discriminator.channels() {
            return Err(Error::Shape(format!(
                "adaptor width {} does not match discriminator input {}",
                adaptor.channels(),
                discriminator.channels()
            )));
        }
        Ok(Self {
            pipeline,
            adaptor,
            discriminator,
            finalized,
        })
    }

    pub fn channels(&self) -> usize {
        self.adaptor.channels()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Freezes the batch-norm running statistics for inference.
    pub fn finalize(&mut self) {
        self.finalized = true;
    }

    /// Training forward with explicit noise: scores `q = G(o)` and
    /// `q + noise` as a single batch-norm batch of `2 * rows` vectors.
    pub fn forward_train(&mut self, local: &[T], rows: usize, noise: &[T]) -> Result<TrainForward<T>> {
        let (q, adaptor_cache) = self.adaptor.forward(local, rows)?;
        if noise.len() != q.len() {
            return Err(Error::Shape(format!(
                "noise has {} values for {} features",
                noise.len(),
                q.len()
            )));
        }
        let mut both = Vec::with_capacity(2 * q.len());
        both.extend_from_slice(&q);
        both.extend(q.iter().zip(noise).map(|(&a, &e)| a + e));
        let (mut scores, disc_cache) = self.discriminator.forward_train(&both, 2 * rows)?;
        let neg = scores.split_off(rows);
        Ok(TrainForward {
            pos: scores,
            neg,
            cache: HeadCache {
                rows,
                adaptor: adaptor_cache,
                discriminator: disc_cache,
            },
        })
    }

    pub fn backward(&self, cache: &HeadCache<T>, grad_pos: &[T], grad_neg: &[T]) -> Result<HeadGrads<T>> {
        let mut loss_grads = Vec::with_capacity(grad_pos.len() + grad_neg.len());
        loss_grads.extend_from_slice(grad_pos);
        loss_grads.extend_from_slice(grad_neg);
        head_backward(&self.adaptor, &self.discriminator, cache, &loss_grads)
    }

    /// Eval-mode discriminator outputs `D(q)` per row.
    pub fn discriminate(&self, features: &[T], rows: usize, already_adapted: bool) -> Result<Vec<T>> {
        if already_adapted {
            self.discriminator.score(features, rows)
        } else {
            let q = self.adaptor.apply(features, rows)?;
            self.discriminator.score(&q, rows)
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            pipeline: self.pipeline.clone(),
            adaptor: self.adaptor.cast(),
            discriminator: self.discriminator.cast(),
            finalized: self.finalized,
        }
    }
}

/// Backward through discriminator and adaptor. `loss_grads` holds
/// `dL/dD` for the normal rows followed by the noised rows; both branches
/// feed the shared adaptor since the noise does not depend on parameters.
pub fn head_backward<T: Real>(
    adaptor: &Adaptor<T>,
    discriminator: &Discriminator<T>,
    cache: &HeadCache<T>,
    loss_grads: &[T],
) -> Result<HeadGrads<T>> {
    let rows = cache.rows;
    if loss_grads.len() != 2 * rows {
        return Err(Error::Internal(format!(
            "{} loss gradients for a cached batch of 2 x {rows}",
            loss_grads.len()
        )));
    }
    let disc = discriminator.backward(&cache.discriminator, loss_grads)?;
    let half = rows * adaptor.channels();
    let (d_pos, d_neg) = disc.input.split_at(half);
    let dq: Vec<T> = d_pos.iter().zip(d_neg).map(|(&a, &b)| a + b).collect();
    let adaptor_grads = adaptor.backward(&cache.adaptor, &dq)?;
    Ok(HeadGrads {
        adaptor: adaptor_grads,
        discriminator: disc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: usize, c: usize) -> Vec<f64> {
        (0..rows * c).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.3).collect()
    }

    #[test]
    fn eval_scores_independent_of_batch() {
        let mut m = Model::<f32>::new(PipelineConfig::default(), AdaptorVariant::Linear, 6, 5, 11).unwrap();
        m.adaptor.weight[3] = 0.25;
        let x: Vec<f32> = (0..7 * 6).map(|i| ((i as f32) * 0.37).cos()).collect();
        let all = m.discriminate(&x, 7, false).unwrap();
        for r in 0..7 {
            let one = m.discriminate(&x[r * 6..(r + 1) * 6], 1, false).unwrap();
            assert_eq!(one[0].to_bits(), all[r].to_bits());
        }
    }

    #[test]
    fn zero_loss_grads_zero_everything() {
        let mut m = Model::<f64>::new(PipelineConfig::default(), AdaptorVariant::Mlp, 3, 4, 1).unwrap();
        let o = features(4, 3);
        let fwd = m.forward_train(&o, 4, &[0.01; 12]).unwrap();
        let g = m.backward(&fwd.cache, &[0.0; 4], &[0.0; 4]).unwrap();
        for t in g.discriminator.tensors().into_iter().chain(g.adaptor.tensors(AdaptorVariant::Mlp)) {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_loss_grads_is_internal_error() {
        let mut m = Model::<f64>::new(PipelineConfig::default(), AdaptorVariant::Linear, 3, 4, 1).unwrap();
        let o = features(4, 3);
        let fwd = m.forward_train(&o, 4, &[0.01; 12]).unwrap();
        assert!(matches!(
            m.backward(&fwd.cache, &[0.0; 3], &[0.0; 4]),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn linear_adaptor_scale_equivariance() {
        let mut a = Adaptor::<f32>::new(AdaptorVariant::Linear, 4);
        for (i, w) in a.weight.iter_mut().enumerate() {
            *w = ((i * 7 % 5) as f32 - 2.0) * 0.3;
        }
        let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.9).sin()).collect();
        let base = a.apply(&x, 3).unwrap();
        let k = 8.0f32;
        let mut scaled = a.clone();
        scaled.weight.iter_mut().for_each(|w| *w /= k);
        let xs: Vec<f32> = x.iter().map(|v| v * k).collect();
        let out = scaled.apply(&xs, 3).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
