//! Inference latency harness.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{build_result, PostProcess};
use crate::model::Model;
use crate::tensors::{FeatureTensor, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub warmup: usize,
    pub post: PostProcess,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl StageStats {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            (ms[n / 2 - 1] + ms[n / 2]) / 2.0
        };
        Self {
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            median_ms: median,
            min_ms: ms[0],
            max_ms: ms[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    /// `[H0, W0, C]` of the local feature map.
    pub shape: [usize; 3],
    pub out_size: [usize; 2],
    pub iters: usize,
    /// Untimed iterations run before measuring.
    pub warmup: usize,
    pub threads: usize,
    pub adaptor: StageStats,
    pub discriminator: StageStats,
    pub post_processing: StageStats,
    pub total: StageStats,
    pub images_per_sec: f64,
}

/// Times the adaptor, the discriminator, and resize plus smoothing on one
/// random local feature map, image by image.
pub fn run_bench(model: &Model<f32>, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.iters == 0 {
        return Err(Error::Config("bench needs at least one timed iteration".into()));
    }
    let c = model.channels();
    let rows = cfg.height * cfg.width;
    if rows == 0 {
        return Err(Error::Config("bench shape must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Vec<f32> = (0..rows * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let features = FeatureTensor::new(cfg.height, cfg.width, c, data)?;

    let mut times = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for i in 0..cfg.warmup + cfg.iters {
        let t0 = Instant::now();
        let q = model.adaptor.apply(features.data(), rows)?;
        let t1 = Instant::now();
        let d = model.discriminator.score(&q, rows)?;
        let t2 = Instant::now();
        let raw = ScoreMap::new(cfg.height, cfg.width, d.into_iter().map(|v| -v).collect())?;
        let result = build_result(raw, &cfg.post)?;
        let t3 = Instant::now();
        std::hint::black_box(&result);
        if i >= cfg.warmup {
            let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
            times[0].push(ms(t0, t1));
            times[1].push(ms(t1, t2));
            times[2].push(ms(t2, t3));
            times[3].push(ms(t0, t3));
        }
    }
    let [a, d, p, t] = times.map(StageStats::from_samples);
    let images_per_sec = 1e3 / t.mean_ms;
    Ok(BenchReport {
        shape: [cfg.height, cfg.width, c],
        out_size: [cfg.post.out_h, cfg.post.out_w],
        iters: cfg.iters,
        warmup: cfg.warmup,
        threads: rayon::current_num_threads(),
        adaptor: a,
        discriminator: d,
        post_processing: p,
        total: t,
        images_per_sec,
    })
}
