use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mean: f32,
    pub sigma: f32,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mean: 0.0,
            sigma: 0.015,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !self.mean.is_finite() {
            return Err(Error::Config("noise mean must be finite".into()));
        }
        Ok(())
    }
}

/// Counter-based noise source. `(seed, stream)` fully determines the
/// sequence, so training step `k` can always reopen stream `k`.
#[derive(Debug, Clone)]
pub struct NoiseRng(ChaCha8Rng);

impl NoiseRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn inner(&mut self) -> &mut impl Rng {
        &mut self.0
    }
}

/// `count` draws from `N(mean, sigma^2)`.
pub fn draw_noise<T: Real>(count: usize, config: &NoiseConfig, rng: &mut NoiseRng) -> Result<Vec<T>> {
    config.validate()?;
    let (mu, sd) = (f64::from(config.mean), f64::from(config.sigma));
    Ok((0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng.0);
            T::lit(mu + sd * z)
        })
        .collect())
}

/// Synthesised anomalous features: every entry gets an independent Gaussian
/// perturbation.
pub fn generate_anomalous<T: Real>(
    features: &[T],
    config: &NoiseConfig,
    rng: &mut NoiseRng,
) -> Result<Vec<T>> {
    let eps = draw_noise::<T>(features.len(), config, rng)?;
    Ok(features.iter().zip(eps).map(|(&q, e)| q + e).collect())
}
