//! Exact ranking metrics and the per-channel spread diagnostic.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensors::{FeatureTensor, ScoreMap};

/// Scores with binary labels (`true` = anomalous).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f32>,
    labels: Vec<bool>,
    n_pos: u64,
}

impl LabeledScores {
    pub fn new(scores: Vec<f32>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("NaN score".into()));
        }
        let n_pos = labels.iter().filter(|&&l| l).count() as u64;
        Ok(Self {
            scores,
            labels,
            n_pos,
        })
    }

    pub fn push(&mut self, score: f32, anomalous: bool) -> Result<()> {
        if score.is_nan() {
            return Err(Error::InvalidArgument("NaN score".into()));
        }
        self.scores.push(score);
        self.labels.push(anomalous);
        self.n_pos += u64::from(anomalous);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> u64 {
        self.n_pos
    }

    pub fn n_neg(&self) -> u64 {
        self.scores.len() as u64 - self.n_pos
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Groups of equal scores in ascending order as `(score, pos, neg)`.
    fn tie_groups(&self) -> Vec<(f32, u64, u64)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_unstable_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut groups: Vec<(f32, u64, u64)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            let (p, n) = (u64::from(self.labels[i]), u64::from(!self.labels[i]));
            match groups.last_mut() {
                // -0.0 and 0.0 tie
                Some(g) if g.0 == s => {
                    g.1 += p;
                    g.2 += n;
                }
                _ => groups.push((s, p, n)),
            }
        }
        groups
    }
}

/// Area under the ROC curve as the normalised Mann-Whitney statistic: the
/// probability a positive outscores a negative, ties counting one half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (np, nn) = (data.n_pos(), data.n_neg());
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {np} anomalous and {nn} normal"
        )));
    }
    // twice the U statistic, kept integral
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for (_, p, n) in data.tie_groups() {
        twice_u += 2 * u128::from(p) * neg_below + u128::from(p) * u128::from(n);
        neg_below += u128::from(n);
    }
    Ok(twice_u as f64 / (2 * u128::from(np) * u128::from(nn)) as f64)
}

/// Binary mask; `true` marks anomalous pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }
}

/// Pools every pixel of every map into one population.
pub fn pool_pixels(maps: &[ScoreMap], masks: &[Mask]) -> Result<LabeledScores> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let total: usize = maps.iter().map(|m| m.data().len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if (map.height(), map.width()) != (mask.height, mask.width) {
            return Err(Error::Shape(format!(
                "sample {i}: map is {}x{}, mask is {}x{}",
                map.height(),
                map.width(),
                mask.height,
                mask.width
            )));
        }
        scores.extend_from_slice(map.data());
        labels.extend_from_slice(&mask.data);
    }
    LabeledScores::new(scores, labels)
}

/// Pixel-level AUROC over all pixels of the test set pooled together.
pub fn pixel_auroc(maps: &[ScoreMap], masks: &[Mask]) -> Result<f64> {
    auroc(&pool_pixels(maps, masks)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Threshold {
    /// Scores strictly above this are called anomalous.
    pub threshold: f64,
    pub f1: f64,
}

fn f1_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
}

/// Threshold maximising the anomalous-class F1 among `-inf`, the midpoints
/// between consecutive distinct scores, and `+inf`. Ties go to the lower
/// threshold.
pub fn best_f1_threshold(data: &LabeledScores) -> Result<F1Threshold> {
    let np = data.n_pos();
    if np == 0 {
        return Err(Error::UndefinedMetric("F1 needs at least one anomalous sample".into()));
    }
    let groups = data.tie_groups();

    // Candidate k sits below group k (k = 0 is -inf, k = len is +inf);
    // everything from group k upward is predicted anomalous.
    let mut tp = np;
    let mut fp = data.n_neg();
    let mut best = F1Threshold {
        threshold: f64::NEG_INFINITY,
        f1: f1_from_counts(tp, fp, 0),
    };
    for k in 0..groups.len() {
        tp -= groups[k].1;
        fp -= groups[k].2;
        let threshold = match groups.get(k + 1) {
            Some(next) => (f64::from(groups[k].0) + f64::from(next.0)) / 2.0,
            None => f64::INFINITY,
        };
        let f1 = f1_from_counts(tp, fp, np - tp);
        if f1 > best.f1 {
            best = F1Threshold { threshold, f1 };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StdProfile {
    pub stds: Vec<f64>,
    /// `bins + 1` ascending edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Population standard deviation of every channel over all vectors, plus a
/// histogram of those deviations on `[0, max]`.
pub fn std_profile(vectors: &[f32], channels: usize, bins: usize) -> Result<StdProfile> {
    if channels == 0 || bins == 0 {
        return Err(Error::InvalidArgument("channels and bins must be positive".into()));
    }
    if !vectors.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "{} values is not a multiple of {channels} channels",
            vectors.len()
        )));
    }
    let n = vectors.len() / channels;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "std profile needs at least 2 vectors, got {n}"
        )));
    }
    // Welford per channel
    let mut mean = vec![0f64; channels];
    let mut m2 = vec![0f64; channels];
    for (k, row) in vectors.chunks_exact(channels).enumerate() {
        let count = (k + 1) as f64;
        for c in 0..channels {
            let x = f64::from(row[c]);
            let delta = x - mean[c];
            mean[c] += delta / count;
            m2[c] += delta * (x - mean[c]);
        }
    }
    let stds: Vec<f64> = m2.iter().map(|v| (v / n as f64).max(0.0).sqrt()).collect();

    let top = stds.iter().copied().fold(0.0, f64::max);
    let width = top / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &s in &stds {
        let b = if width > 0.0 {
            ((s / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok(StdProfile {
        stds,
        bin_edges,
        counts,
    })
}

/// [`std_profile`] over every location of every tensor.
pub fn std_profile_tensors(tensors: &[FeatureTensor], bins: usize) -> Result<StdProfile> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no tensors".into()))?;
    let c = first.channels();
    let mut all = Vec::new();
    for t in tensors {
        if t.channels() != c {
            return Err(Error::Shape("tensors disagree on channel count".into()));
        }
        all.extend_from_slice(t.data());
    }
    std_profile(&all, c, bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(scores: &[f32], labels: &[u8]) -> LabeledScores {
        LabeledScores::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(auroc(&ls(&[2.0, 3.0, 0.0, 1.0], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&ls(&[2.0, 3.0, 0.0, 1.0], &[0, 0, 1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_is_half() {
        assert_eq!(auroc(&ls(&[0.3; 6], &[1, 0, 1, 0, 0, 0])).unwrap(), 0.5);
    }

    #[test]
    fn textbook_example() {
        let v = auroc(&ls(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&ls(&[1.0, 2.0], &[0, 0])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auroc(&ls(&[1.0, 2.0], &[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn nan_rejected() {
        assert!(LabeledScores::new(vec![f32::NAN], vec![true]).is_err());
    }

    #[test]
    fn pixel_auroc_top_half() {
        let map = ScoreMap::new(2, 2, vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let mask = Mask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert_eq!(pixel_auroc(&[map], &[mask]).unwrap(), 1.0);
    }

    #[test]
    fn pixel_auroc_all_normal_is_undefined() {
        let map = ScoreMap::new(1, 2, vec![0.9, 0.1]).unwrap();
        assert!(matches!(
            pixel_auroc(&[map], &[Mask::empty(1, 2)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pixel_auroc_dim_mismatch() {
        let map = ScoreMap::new(1, 2, vec![0.9, 0.1]).unwrap();
        assert!(matches!(
            pixel_auroc(&[map], &[Mask::empty(2, 1)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn f1_perfect_split() {
        let r = best_f1_threshold(&ls(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap();
        assert_eq!(r.f1, 1.0);
        assert!((r.threshold - 0.5).abs() < 1e-7);
    }

    #[test]
    fn f1_all_equal_half_positive() {
        let r = best_f1_threshold(&ls(&[0.5; 8], &[1, 0, 1, 0, 1, 0, 1, 0])).unwrap();
        let p = 0.5;
        assert!((r.f1 - 2.0 * p / (p + 1.0)).abs() < 1e-12);
        assert_eq!(r.threshold, f64::NEG_INFINITY);
    }

    #[test]
    fn f1_without_positives_fails() {
        assert!(best_f1_threshold(&ls(&[0.1, 0.2], &[0, 0])).is_err());
    }

    #[test]
    fn std_profile_basics() {
        let p = std_profile(&[1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0], 2, 4).unwrap();
        assert_eq!(p.stds, vec![0.0, 1.0]);
        assert_eq!(p.counts.iter().sum::<u64>(), 2);
        assert_eq!(p.bin_edges.len(), 5);
        assert_eq!(p.counts, vec![1, 0, 0, 1]);

        let flat = std_profile(&[3.0; 12], 3, 50).unwrap();
        assert!(flat.stds.iter().all(|&s| s == 0.0));
        assert_eq!(flat.counts[0], 3);
    }

    #[test]
    fn std_profile_needs_two_vectors() {
        assert!(std_profile(&[1.0, 2.0], 2, 10).is_err());
        assert!(std_profile(&[1.0, 2.0, 3.0], 2, 10).is_err());
    }
}
