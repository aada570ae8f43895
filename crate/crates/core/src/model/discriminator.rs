use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::linalg::{leaky, leaky_grad, matmul, Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated.
    Train,
    /// Running statistics; a pure function of each input row.
    Eval,
}

/// `linear(C -> Hd) -> batch norm -> leaky relu -> linear(Hd -> 1)`.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    channels: usize,
    hidden: usize,
    /// `C x Hd`
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
    /// `Hd x 1`
    pub w2: Vec<T>,
    pub b2: T,
    pub leaky_slope: T,
    pub bn_momentum: T,
    pub bn_eps: T,
    version: u64,
}

impl<T: PartialEq> PartialEq for Discriminator<T> {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.hidden == other.hidden
            && self.w1 == other.w1
            && self.b1 == other.b1
            && self.bn_gamma == other.bn_gamma
            && self.bn_beta == other.bn_beta
            && self.bn_running_mean == other.bn_running_mean
            && self.bn_running_var == other.bn_running_var
            && self.w2 == other.w2
            && self.b2 == other.b2
            && self.leaky_slope == other.leaky_slope
            && self.bn_momentum == other.bn_momentum
            && self.bn_eps == other.bn_eps
    }
}

/// Everything the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct DiscriminatorCache<T> {
    rows: usize,
    version: u64,
    input: Vec<T>,
    xhat: Vec<T>,
    /// Batch-norm output before the activation.
    bn_out: Vec<T>,
    act: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorGrads<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
    /// `dL/dinput`, `rows x C`.
    pub input: Vec<T>,
}

impl<T: Real> Discriminator<T> {
    /// Linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
    /// gamma 1, beta 0, running mean 0, running var 1. Draws are made in
    /// `f32` so `f32` and `f64` instances from one seed agree.
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "discriminator dims must be positive, got C={channels} Hd={hidden}"
            )));
        }
        let mut uniform = |fan_in: usize, n: usize| -> Vec<T> {
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..n)
                .map(|_| T::lit(f64::from(rng.random_range(-bound..bound))))
                .collect()
        };
        let w1 = uniform(channels, channels * hidden);
        let w2 = uniform(hidden, hidden);
        Ok(Self {
            channels,
            hidden,
            w1,
            b1: vec![T::zero(); hidden],
            bn_gamma: vec![T::one(); hidden],
            bn_beta: vec![T::zero(); hidden],
            bn_running_mean: vec![T::zero(); hidden],
            bn_running_var: vec![T::one(); hidden],
            w2,
            b2: T::zero(),
            leaky_slope: T::lit(0.2),
            bn_momentum: T::lit(0.1),
            bn_eps: T::lit(1e-5),
            version: 0,
        })
    }

    /// All-zero parameters of the given shape with default hyperparameters;
    /// a target for deserialisation. Call [`validate`](Self::validate) after
    /// filling the fields.
    pub fn zeroed(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            w1: vec![T::zero(); channels * hidden],
            b1: vec![T::zero(); hidden],
            bn_gamma: vec![T::zero(); hidden],
            bn_beta: vec![T::zero(); hidden],
            bn_running_mean: vec![T::zero(); hidden],
            bn_running_var: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden],
            b2: T::zero(),
            leaky_slope: T::lit(0.2),
            bn_momentum: T::lit(0.1),
            bn_eps: T::lit(1e-5),
            version: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Checks the structural invariants; used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let (c, hd) = (self.channels, self.hidden);
        let sizes = [
            ("w1", self.w1.len(), c * hd),
            ("b1", self.b1.len(), hd),
            ("bn_gamma", self.bn_gamma.len(), hd),
            ("bn_beta", self.bn_beta.len(), hd),
            ("bn_running_mean", self.bn_running_mean.len(), hd),
            ("bn_running_var", self.bn_running_var.len(), hd),
            ("w2", self.w2.len(), hd),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::Shape(format!("{name}: expected {want} values, got {got}")));
            }
        }
        let all = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.bn_gamma)
            .chain(&self.bn_beta)
            .chain(&self.bn_running_mean)
            .chain(&self.bn_running_var)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite discriminator parameter".into()));
        }
        if self.bn_running_var.iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidArgument("running variance must be positive".into()));
        }
        Ok(())
    }

    fn check_input(&self, features: &[T], rows: usize) -> Result<()> {
        if rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if features.len() != rows * self.channels {
            return Err(Error::Shape(format!(
                "discriminator expects {rows} x {} features, got {} values",
                self.channels,
                features.len()
            )));
        }
        Ok(())
    }

    fn linear1(&self, features: &[T], rows: usize) -> Vec<T> {
        let hd = self.hidden;
        let mut h = vec![T::zero(); rows * hd];
        matmul(
            Mat::new(features, rows, self.channels),
            Mat::new(&self.w1, self.channels, hd),
            &mut h,
            false,
        );
        for row in h.chunks_exact_mut(hd) {
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v = *v + *b;
            }
        }
        h
    }

    fn head(&self, act: &[T], rows: usize) -> Vec<T> {
        let mut s = vec![T::zero(); rows];
        matmul(
            Mat::new(act, rows, self.hidden),
            Mat::new(&self.w2, self.hidden, 1),
            &mut s,
            false,
        );
        s.iter_mut().for_each(|v| *v = *v + self.b2);
        s
    }

    /// Eval-mode scores. Each row is scored independently of the others.
    pub fn score(&self, features: &[T], rows: usize) -> Result<Vec<T>> {
        self.check_input(features, rows)?;
        let hd = self.hidden;
        let mut h = self.linear1(features, rows);
        let scale: Vec<T> = self
            .bn_running_var
            .iter()
            .zip(&self.bn_gamma)
            .map(|(&v, &g)| g / (v + self.bn_eps).sqrt())
            .collect();
        for row in h.chunks_exact_mut(hd) {
            for j in 0..hd {
                let y = (row[j] - self.bn_running_mean[j]) * scale[j] + self.bn_beta[j];
                row[j] = leaky(y, self.leaky_slope);
            }
        }
        Ok(self.head(&h, rows))
    }

    /// Train-mode forward: normalises with batch statistics over all rows,
    /// updates the running statistics, and returns a cache for backward.
    pub fn forward_train(
        &mut self,
        features: &[T],
        rows: usize,
    ) -> Result<(Vec<T>, DiscriminatorCache<T>)> {
        self.check_input(features, rows)?;
        if rows < 2 {
            return Err(Error::InvalidArgument(
                "train-mode batch norm needs at least 2 feature vectors".into(),
            ));
        }
        let hd = self.hidden;
        let h = self.linear1(features, rows);

        let n = rows as f64;
        let mut mean = vec![0f64; hd];
        for row in h.chunks_exact(hd) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; hd];
        for row in h.chunks_exact(hd) {
            for j in 0..hd {
                let d = row[j].as_f64() - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);

        let eps = self.bn_eps.as_f64();
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();

        let mut xhat = vec![T::zero(); rows * hd];
        let mut bn_out = vec![T::zero(); rows * hd];
        let mut act = vec![T::zero(); rows * hd];
        for r in 0..rows {
            for j in 0..hd {
                let i = r * hd + j;
                let xn = (h[i] - mean_t[j]) * inv_std[j];
                let y = self.bn_gamma[j] * xn + self.bn_beta[j];
                xhat[i] = xn;
                bn_out[i] = y;
                act[i] = leaky(y, self.leaky_slope);
            }
        }
        let scores = self.head(&act, rows);

        // running var tracks the unbiased batch variance
        let m = self.bn_momentum;
        let unbias = n / (n - 1.0);
        for j in 0..hd {
            self.bn_running_mean[j] = (T::one() - m) * self.bn_running_mean[j] + m * mean_t[j];
            self.bn_running_var[j] =
                (T::one() - m) * self.bn_running_var[j] + m * T::lit(var[j] * unbias);
        }

        let cache = DiscriminatorCache {
            rows,
            version: self.version,
            input: features.to_vec(),
            xhat,
            bn_out,
            act,
            inv_std,
        };
        Ok((scores, cache))
    }

    /// Dispatches on `mode`; the cache is only produced in train mode.
    pub fn forward(
        &mut self,
        features: &[T],
        rows: usize,
        mode: Mode,
    ) -> Result<(Vec<T>, Option<DiscriminatorCache<T>>)> {
        match mode {
            Mode::Train => self
                .forward_train(features, rows)
                .map(|(s, c)| (s, Some(c))),
            Mode::Eval => self.score(features, rows).map(|s| (s, None)),
        }
    }

    /// Exact gradients of a scalar loss given `dL/dscore` per row, through
    /// the batch-statistics terms of the normalisation.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        grad_scores: &[T],
    ) -> Result<DiscriminatorGrads<T>> {
        if cache.version != self.version {
            return Err(Error::Internal(format!(
                "discriminator cache from parameter version {} used at version {}",
                cache.version, self.version
            )));
        }
        let (rows, hd, c) = (cache.rows, self.hidden, self.channels);
        if grad_scores.len() != rows {
            return Err(Error::Internal(format!(
                "{} score gradients for a cached batch of {rows}",
                grad_scores.len()
            )));
        }

        let mut dw2 = vec![T::zero(); hd];
        matmul(
            Mat::new(&cache.act, rows, hd).t(),
            Mat::new(grad_scores, rows, 1),
            &mut dw2,
            false,
        );
        let db2 = T::lit(grad_scores.iter().map(|g| g.as_f64()).sum());

        // dL/d(bn_out)
        let mut dy = vec![T::zero(); rows * hd];
        for (r, &gs) in grad_scores.iter().enumerate() {
            for j in 0..hd {
                let i = r * hd + j;
                dy[i] = gs * self.w2[j] * leaky_grad(cache.bn_out[i], self.leaky_slope);
            }
        }

        let mut sum_dy = vec![0f64; hd];
        let mut sum_dy_xhat = vec![0f64; hd];
        for r in 0..rows {
            for j in 0..hd {
                let i = r * hd + j;
                sum_dy[j] += dy[i].as_f64();
                sum_dy_xhat[j] += (dy[i] * cache.xhat[i]).as_f64();
            }
        }
        let dgamma: Vec<T> = sum_dy_xhat.iter().map(|&v| T::lit(v)).collect();
        let dbeta: Vec<T> = sum_dy.iter().map(|&v| T::lit(v)).collect();

        // dh = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy * xhat))
        let n = T::lit(rows as f64);
        let mut dh = vec![T::zero(); rows * hd];
        for r in 0..rows {
            for j in 0..hd {
                let i = r * hd + j;
                let k = self.bn_gamma[j] * cache.inv_std[j] / n;
                dh[i] = k * (n * dy[i] - dbeta[j] - cache.xhat[i] * dgamma[j]);
            }
        }
        let mut db1 = vec![0f64; hd];
        for row in dh.chunks_exact(hd) {
            for (b, v) in db1.iter_mut().zip(row) {
                *b += v.as_f64();
            }
        }

        let mut dw1 = vec![T::zero(); c * hd];
        matmul(
            Mat::new(&cache.input, rows, c).t(),
            Mat::new(&dh, rows, hd),
            &mut dw1,
            false,
        );
        let mut dinput = vec![T::zero(); rows * c];
        matmul(
            Mat::new(&dh, rows, hd),
            Mat::new(&self.w1, c, hd).t(),
            &mut dinput,
            false,
        );

        Ok(DiscriminatorGrads {
            w1: dw1,
            b1: db1.into_iter().map(T::lit).collect(),
            bn_gamma: dgamma,
            bn_beta: dbeta,
            w2: dw2,
            b2: db2,
            input: dinput,
        })
    }

    /// Trainable tensors in a fixed order: w1, b1, gamma, beta, w2, b2.
    pub fn params(&self) -> Vec<&[T]> {
        vec![
            &self.w1,
            &self.b1,
            &self.bn_gamma,
            &self.bn_beta,
            &self.w2,
            std::slice::from_ref(&self.b2),
        ]
    }

    /// Mutable view of the trainable tensors. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        let one = |x: T| U::lit(x.as_f64());
        Discriminator {
            channels: self.channels,
            hidden: self.hidden,
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            bn_gamma: conv(&self.bn_gamma),
            bn_beta: conv(&self.bn_beta),
            bn_running_mean: conv(&self.bn_running_mean),
            bn_running_var: conv(&self.bn_running_var),
            w2: conv(&self.w2),
            b2: one(self.b2),
            leaky_slope: one(self.leaky_slope),
            bn_momentum: one(self.bn_momentum),
            bn_eps: one(self.bn_eps),
            version: 0,
        }
    }
}

impl<T: Real> DiscriminatorGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        vec![
            &self.w1,
            &self.b1,
            &self.bn_gamma,
            &self.bn_beta,
            &self.w2,
            std::slice::from_ref(&self.b2),
        ]
    }
}
