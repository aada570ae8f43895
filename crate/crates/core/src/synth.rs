//! Synthetic feature datasets with known anomalies.
//!
//! Normal features at cell `(y, x)` come from a fixed per-cell Gaussian
//! mixture whose means and spread live in a random `latent_dim`-dimensional
//! subspace, plus a small isotropic term. This mimics the low intrinsic
//! dimension of backbone features. An anomalous test map is a fresh normal
//! map with a random rectangle of cells moved by `shift` along one random
//! unit direction. Channels are split across hierarchy levels 2 and 3 at
//! full grid resolution, so the default pipeline applies unchanged.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{std_profile, Mask};
use crate::io::{atomic_write, write_feature_file, write_manifest, Manifest, ManifestSample, Split};
use crate::pipeline::HierarchyStack;
use crate::tensors::FeatureTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Fraction of test maps that carry an anomaly.
    pub defect_rate: f64,
    pub shift: f32,
    pub seed: u64,
    pub latent_dim: usize,
    pub components: usize,
    /// Image pixels per feature cell along each axis.
    pub cell_pixels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            grid_h: 16,
            grid_w: 16,
            channels: 32,
            defect_rate: 0.5,
            shift: 1.0,
            seed: 0,
            latent_dim: 4,
            components: 3,
            cell_pixels: 8,
        }
    }
}

/// Spread of the mixture means inside the subspace.
const MEAN_SCALE: f64 = 0.2;
/// Within-component spread inside the subspace.
const WITHIN_SCALE: f64 = 0.05;
/// Isotropic spread in every channel.
const ISOTROPIC_SCALE: f64 = 0.005;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("need at least one train and one test map".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.cell_pixels == 0 {
            return Err(Error::Config("grid and cell size must be positive".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config("need at least 2 channels (one per level)".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > self.channels {
            return Err(Error::Config(format!(
                "latent dim must be in 1..={}, got {}",
                self.channels, self.latent_dim
            )));
        }
        if self.components == 0 {
            return Err(Error::Config("need at least one mixture component".into()));
        }
        if !(0.0..=1.0).contains(&self.defect_rate) {
            return Err(Error::Config(format!("defect rate {} outside [0, 1]", self.defect_rate)));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(Error::Config("shift must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> [usize; 2] {
        [self.grid_h * self.cell_pixels, self.grid_w * self.cell_pixels]
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// The fixed generative structure shared by every map.
struct World {
    /// `C x r`, orthonormal columns.
    basis: Vec<f64>,
    /// Per cell, `components x r` latent means.
    means: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, r) = (cfg.channels, cfg.latent_dim);
        // Gram-Schmidt on Gaussian columns
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
        while cols.len() < r {
            let mut v: Vec<f64> = (0..c).map(|_| normal(rng)).collect();
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                cols.push(v);
            }
        }
        let mut basis = vec![0.0; c * r];
        for (k, col) in cols.iter().enumerate() {
            for i in 0..c {
                basis[i * r + k] = col[i];
            }
        }
        let means = (0..cfg.grid_h * cfg.grid_w)
            .map(|_| (0..cfg.components * r).map(|_| MEAN_SCALE * normal(rng)).collect())
            .collect();
        Self { basis, means }
    }

    /// One normal map, `H x W x C` channel-last.
    fn sample(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (c, r) = (cfg.channels, cfg.latent_dim);
        let mut out = vec![0.0; cfg.grid_h * cfg.grid_w * c];
        let mut z = vec![0.0; r];
        for (cell, means) in self.means.iter().enumerate() {
            let k = rng.random_range(0..cfg.components);
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = means[k * r + j] + WITHIN_SCALE * normal(rng);
            }
            let f = &mut out[cell * c..(cell + 1) * c];
            for (i, fi) in f.iter_mut().enumerate() {
                let row = &self.basis[i * r..(i + 1) * r];
                *fi = row.iter().zip(&z).map(|(b, z)| b * z).sum::<f64>() + ISOTROPIC_SCALE * normal(rng);
            }
        }
        out
    }
}

/// Cells `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    fn random(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let side = |n: usize, rng: &mut ChaCha8Rng| {
            let lo = 3.min(n);
            let hi = (n / 3).max(lo);
            rng.random_range(lo..=hi)
        };
        let h = side(cfg.grid_h, rng);
        let w = side(cfg.grid_w, rng);
        let y0 = rng.random_range(0..=cfg.grid_h - h);
        let x0 = rng.random_range(0..=cfg.grid_w - w);
        Self {
            y0,
            y1: y0 + h,
            x0,
            x1: x0 + w,
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Pixel mask at `cell_pixels` pixels per cell.
    pub fn mask(&self, cfg: &SynthConfig) -> Mask {
        let [h, w] = cfg.image_size();
        let data = (0..h * w)
            .map(|i| self.contains(i / w / cfg.cell_pixels, i % w / cfg.cell_pixels))
            .collect();
        Mask {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub split: Split,
    pub stack: HierarchyStack,
    pub defect: Option<Rect>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
    /// Mean per-channel population std of the normal training features.
    pub feature_std: f64,
}

fn to_stack(cfg: &SynthConfig, data: &[f64]) -> Result<HierarchyStack> {
    let c = cfg.channels;
    let c2 = c / 2;
    let split = |lo: usize, hi: usize| {
        FeatureTensor::from_fn(cfg.grid_h, cfg.grid_w, hi - lo, |y, x, ch| {
            data[(y * cfg.grid_w + x) * c + lo + ch] as f32
        })
    };
    HierarchyStack::new(vec![(2, split(0, c2)?), (3, split(c2, c)?)])
}

/// Stream of the shared structure; samples use streams `0..n_train + n_test`.
const WORLD_STREAM: u64 = u64::MAX;

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    world_rng.set_stream(WORLD_STREAM);
    let world = World::new(cfg, &mut world_rng);

    let n_defect = (cfg.n_test as f64 * cfg.defect_rate).round() as usize;
    let mut defective: Vec<bool> = (0..cfg.n_test).map(|i| i < n_defect).collect();
    defective.shuffle(&mut world_rng);

    let total = cfg.n_train + cfg.n_test;
    let built: Vec<(SynthSample, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut data = world.sample(cfg, &mut rng);
            let (id, split, defect) = if i < cfg.n_train {
                (format!("train_{i:04}"), Split::Train, None)
            } else {
                let t = i - cfg.n_train;
                let defect = defective[t].then(|| {
                    let rect = Rect::random(cfg, &mut rng);
                    let mut dir: Vec<f64> = (0..cfg.channels).map(|_| normal(&mut rng)).collect();
                    let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                    dir.iter_mut().for_each(|d| *d *= f64::from(cfg.shift) / n);
                    for y in rect.y0..rect.y1 {
                        for x in rect.x0..rect.x1 {
                            let off = (y * cfg.grid_w + x) * cfg.channels;
                            data[off..off + cfg.channels]
                                .iter_mut()
                                .zip(&dir)
                                .for_each(|(f, d)| *f += d);
                        }
                    }
                    rect
                });
                (format!("test_{t:04}"), Split::Test, defect)
            };
            let stack = to_stack(cfg, &data)?;
            Ok((
                SynthSample {
                    id,
                    split,
                    stack,
                    defect,
                },
                if split == Split::Train { data } else { Vec::new() },
            ))
        })
        .collect::<Result<_>>()?;

    let train_values: Vec<f32> = built
        .iter()
        .flat_map(|(_, d)| d.iter().map(|&v| v as f32))
        .collect();
    let profile = std_profile(&train_values, cfg.channels, 50)?;
    let feature_std = profile.stds.iter().sum::<f64>() / cfg.channels as f64;
    Ok(SynthDataset {
        samples: built.into_iter().map(|(s, _)| s).collect(),
        feature_std,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SynthMeta<'a> {
    generator: &'static str,
    config: &'a SynthConfig,
    feature_std: f64,
    shift_over_std: f64,
}

/// Writes `features/*.snft`, `masks/*.png` and `manifest.json` under `out`;
/// returns the manifest path.
pub fn write_dataset(cfg: &SynthConfig, ds: &SynthDataset, out: &Path) -> Result<PathBuf> {
    let features = out.join("features");
    let masks = out.join("masks");
    for d in [&features, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let entries = ds
        .samples
        .par_iter()
        .map(|s| {
            let feature_rel = PathBuf::from("features").join(format!("{}.snft", s.id));
            write_feature_file(&s.stack, &out.join(&feature_rel))?;
            let mask_rel = match s.defect {
                Some(rect) => {
                    let rel = PathBuf::from("masks").join(format!("{}.png", s.id));
                    write_mask(&rect.mask(cfg), &out.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            Ok(ManifestSample {
                id: s.id.clone(),
                split: s.split,
                label: u8::from(s.defect.is_some()),
                feature_path: feature_rel,
                mask_path: mask_rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = Manifest::new("synthetic", cfg.image_size(), entries);
    let meta = SynthMeta {
        generator: "snad-synth",
        config: cfg,
        feature_std: ds.feature_std,
        shift_over_std: f64::from(cfg.shift) / ds.feature_std,
    };
    manifest.meta = Some(serde_json::to_value(&meta).map_err(|e| Error::Internal(e.to_string()))?);
    let path = out.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    use image::{ExtendedColorType, ImageEncoder};
    let pixels: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(&pixels, mask.width as u32, mask.height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    atomic_write(path, &png)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 6,
            n_test: 4,
            grid_h: 8,
            grid_w: 10,
            channels: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_labels_and_counts() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.samples.len(), 10);
        let anomalous = ds.samples.iter().filter(|s| s.defect.is_some()).count();
        assert_eq!(anomalous, 2);
        for s in &ds.samples {
            let idx: Vec<u16> = s.stack.indices().collect();
            assert_eq!(idx, vec![2, 3]);
            let l2 = s.stack.level(2).unwrap();
            assert_eq!((l2.height(), l2.width(), l2.channels()), (8, 10, 4));
            if s.split == Split::Train {
                assert!(s.defect.is_none());
            }
        }
        assert!(ds.feature_std > 0.0);
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.stack, y.stack);
            assert_eq!(x.defect, y.defect);
        }
    }

    #[test]
    fn shift_moves_only_the_rectangle() {
        let mut cfg = small();
        cfg.shift = 0.0;
        let base = generate(&cfg).unwrap();
        cfg.shift = 2.0;
        let moved = generate(&cfg).unwrap();
        for (a, b) in base.samples.iter().zip(&moved.samples) {
            let (ta, tb) = (a.stack.level(2).unwrap(), b.stack.level(2).unwrap());
            for y in 0..8 {
                for x in 0..10 {
                    let inside = b.defect.is_some_and(|r| r.contains(y, x));
                    let diff: f32 = ta.at(y, x).iter().zip(tb.at(y, x)).map(|(p, q)| (p - q).abs()).sum();
                    assert_eq!(diff > 0.0, inside, "{} ({y},{x})", a.id);
                }
            }
        }
    }

    #[test]
    fn mask_matches_rectangle() {
        let cfg = small();
        let r = Rect {
            y0: 1,
            y1: 3,
            x0: 4,
            x1: 5,
        };
        let m = r.mask(&cfg);
        assert_eq!((m.height, m.width), (64, 80));
        assert_eq!(m.data.iter().filter(|&&v| v).count(), 2 * 8 * 8);
        assert!(m.data[8 * 80 + 32]);
        assert!(!m.data[8 * 80 + 31]);
    }
}
