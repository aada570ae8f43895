use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{leaky, leaky_grad, matmul, Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptorVariant {
    /// Pass-through; never trained.
    Identity,
    /// Single bias-free `C x C` projection.
    Linear,
    /// `linear -> leaky relu -> linear`, both `C x C`, bias-free.
    Mlp,
}

impl AdaptorVariant {
    pub fn name(self) -> &'static str {
        match self {
            AdaptorVariant::Identity => "identity",
            AdaptorVariant::Linear => "linear",
            AdaptorVariant::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for AdaptorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown adaptor variant {other:?}"))),
        }
    }
}

/// Feature adaptor: maps each local feature `o` (row vector) to `q = o W`.
#[derive(Debug, Clone)]
pub struct Adaptor<T> {
    variant: AdaptorVariant,
    channels: usize,
    /// `C x C`, row index = input channel. Empty for the identity variant.
    pub weight: Vec<T>,
    /// Second layer of the MLP variant, empty otherwise.
    pub weight2: Vec<T>,
    pub leaky_slope: T,
    version: u64,
}

// The version only tags caches, so it is not part of the value.
impl<T: PartialEq> PartialEq for Adaptor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.channels == other.channels
            && self.weight == other.weight
            && self.weight2 == other.weight2
            && self.leaky_slope == other.leaky_slope
    }
}

#[derive(Debug, Clone)]
pub struct AdaptorCache<T> {
    rows: usize,
    version: u64,
    input: Vec<T>,
    /// MLP only: first-layer pre-activation and activation.
    pre: Vec<T>,
    act: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorGrads<T> {
    pub weight: Vec<T>,
    pub weight2: Vec<T>,
}

fn eye<T: Real>(n: usize) -> Vec<T> {
    let mut w = vec![T::zero(); n * n];
    for i in 0..n {
        w[i * n + i] = T::one();
    }
    w
}

impl<T: Real> Adaptor<T> {
    /// Weights start at the identity so the untrained adaptor is a no-op
    /// (the MLP variant still applies its activation).
    pub fn new(variant: AdaptorVariant, channels: usize) -> Self {
        let (weight, weight2) = match variant {
            AdaptorVariant::Identity => (Vec::new(), Vec::new()),
            AdaptorVariant::Linear => (eye(channels), Vec::new()),
            AdaptorVariant::Mlp => (eye(channels), eye(channels)),
        };
        Self {
            variant,
            channels,
            weight,
            weight2,
            leaky_slope: T::lit(0.2),
            version: 0,
        }
    }

    pub fn from_parts(
        variant: AdaptorVariant,
        channels: usize,
        weight: Vec<T>,
        weight2: Vec<T>,
    ) -> Result<Self> {
        let sq = channels * channels;
        let (w1_len, w2_len) = match variant {
            AdaptorVariant::Identity => (0, 0),
            AdaptorVariant::Linear => (sq, 0),
            AdaptorVariant::Mlp => (sq, sq),
        };
        if weight.len() != w1_len || weight2.len() != w2_len {
            return Err(Error::Shape(format!(
                "{} adaptor with C={channels} expects weights of {w1_len}/{w2_len}, got {}/{}",
                variant.name(),
                weight.len(),
                weight2.len()
            )));
        }
        if weight.iter().chain(&weight2).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite adaptor weight".into()));
        }
        Ok(Self {
            variant,
            channels,
            weight,
            weight2,
            leaky_slope: T::lit(0.2),
            version: 0,
        })
    }

    pub fn variant(&self) -> AdaptorVariant {
        self.variant
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_trainable(&self) -> bool {
        self.variant != AdaptorVariant::Identity
    }

    fn check_input(&self, features: &[T], rows: usize) -> Result<()> {
        if features.len() != rows * self.channels {
            return Err(Error::Shape(format!(
                "adaptor expects {rows} x {} features, got {} values",
                self.channels,
                features.len()
            )));
        }
        Ok(())
    }

    /// Forward pass without keeping anything for backward.
    pub fn apply(&self, features: &[T], rows: usize) -> Result<Vec<T>> {
        self.check_input(features, rows)?;
        let c = self.channels;
        Ok(match self.variant {
            AdaptorVariant::Identity => features.to_vec(),
            AdaptorVariant::Linear => {
                let mut q = vec![T::zero(); rows * c];
                matmul(Mat::new(features, rows, c), Mat::new(&self.weight, c, c), &mut q, false);
                q
            }
            AdaptorVariant::Mlp => {
                let mut u = vec![T::zero(); rows * c];
                matmul(Mat::new(features, rows, c), Mat::new(&self.weight, c, c), &mut u, false);
                u.iter_mut().for_each(|v| *v = leaky(*v, self.leaky_slope));
                let mut q = vec![T::zero(); rows * c];
                matmul(Mat::new(&u, rows, c), Mat::new(&self.weight2, c, c), &mut q, false);
                q
            }
        })
    }

    pub fn forward(&self, features: &[T], rows: usize) -> Result<(Vec<T>, AdaptorCache<T>)> {
        self.check_input(features, rows)?;
        let c = self.channels;
        let mut cache = AdaptorCache {
            rows,
            version: self.version,
            input: Vec::new(),
            pre: Vec::new(),
            act: Vec::new(),
        };
        let q = match self.variant {
            AdaptorVariant::Identity => features.to_vec(),
            AdaptorVariant::Linear => {
                let mut q = vec![T::zero(); rows * c];
                matmul(Mat::new(features, rows, c), Mat::new(&self.weight, c, c), &mut q, false);
                cache.input = features.to_vec();
                q
            }
            AdaptorVariant::Mlp => {
                let mut pre = vec![T::zero(); rows * c];
                matmul(Mat::new(features, rows, c), Mat::new(&self.weight, c, c), &mut pre, false);
                let act: Vec<T> = pre.iter().map(|&v| leaky(v, self.leaky_slope)).collect();
                let mut q = vec![T::zero(); rows * c];
                matmul(Mat::new(&act, rows, c), Mat::new(&self.weight2, c, c), &mut q, false);
                cache.input = features.to_vec();
                cache.pre = pre;
                cache.act = act;
                q
            }
        };
        Ok((q, cache))
    }

    /// Parameter gradients given `dL/dq`. Inputs are constants, so no
    /// gradient is produced for them.
    pub fn backward(&self, cache: &AdaptorCache<T>, grad_out: &[T]) -> Result<AdaptorGrads<T>> {
        if cache.version != self.version {
            return Err(Error::Internal(format!(
                "adaptor cache from parameter version {} used at version {}",
                cache.version, self.version
            )));
        }
        let (rows, c) = (cache.rows, self.channels);
        if grad_out.len() != rows * c {
            return Err(Error::Internal(format!(
                "adaptor gradient has {} values, cache expects {}",
                grad_out.len(),
                rows * c
            )));
        }
        Ok(match self.variant {
            AdaptorVariant::Identity => AdaptorGrads {
                weight: Vec::new(),
                weight2: Vec::new(),
            },
            AdaptorVariant::Linear => {
                let mut dw = vec![T::zero(); c * c];
                matmul(
                    Mat::new(&cache.input, rows, c).t(),
                    Mat::new(grad_out, rows, c),
                    &mut dw,
                    false,
                );
                AdaptorGrads {
                    weight: dw,
                    weight2: Vec::new(),
                }
            }
            AdaptorVariant::Mlp => {
                let mut dw2 = vec![T::zero(); c * c];
                matmul(
                    Mat::new(&cache.act, rows, c).t(),
                    Mat::new(grad_out, rows, c),
                    &mut dw2,
                    false,
                );
                let mut dact = vec![T::zero(); rows * c];
                matmul(
                    Mat::new(grad_out, rows, c),
                    Mat::new(&self.weight2, c, c).t(),
                    &mut dact,
                    false,
                );
                for (d, &p) in dact.iter_mut().zip(&cache.pre) {
                    *d = *d * leaky_grad(p, self.leaky_slope);
                }
                let mut dw = vec![T::zero(); c * c];
                matmul(
                    Mat::new(&cache.input, rows, c).t(),
                    Mat::new(&dact, rows, c),
                    &mut dw,
                    false,
                );
                AdaptorGrads {
                    weight: dw,
                    weight2: dw2,
                }
            }
        })
    }

    /// Trainable tensors in a fixed order: `[weight, weight2]` for the MLP,
    /// `[weight]` for linear, nothing for identity.
    pub fn params(&self) -> Vec<&[T]> {
        match self.variant {
            AdaptorVariant::Identity => vec![],
            AdaptorVariant::Linear => vec![&self.weight],
            AdaptorVariant::Mlp => vec![&self.weight, &self.weight2],
        }
    }

    /// Mutable view of the trainable tensors. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        match self.variant {
            AdaptorVariant::Identity => vec![],
            AdaptorVariant::Linear => vec![&mut self.weight],
            AdaptorVariant::Mlp => vec![&mut self.weight, &mut self.weight2],
        }
    }

    pub fn cast<U: Real>(&self) -> Adaptor<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        Adaptor {
            variant: self.variant,
            channels: self.channels,
            weight: conv(&self.weight),
            weight2: conv(&self.weight2),
            leaky_slope: U::lit(self.leaky_slope.as_f64()),
            version: 0,
        }
    }
}

impl<T: Real> AdaptorGrads<T> {
    pub fn tensors(&self, variant: AdaptorVariant) -> Vec<&[T]> {
        match variant {
            AdaptorVariant::Identity => vec![],
            AdaptorVariant::Linear => vec![&self.weight],
            AdaptorVariant::Mlp => vec![&self.weight, &self.weight2],
        }
    }
}
