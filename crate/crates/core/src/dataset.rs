//! Manifest-level training and evaluation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{auroc, best_f1_threshold, pool_pixels, LabeledScores, Mask};
use crate::inference::{infer_batch, AnomalyResult, PostProcess};
use crate::io::{read_feature_file, read_mask, Manifest, ManifestSample, Split};
use crate::model::Model;
use crate::pipeline::HierarchyStack;

/// Reads every feature file of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<(ManifestSample, HierarchyStack)>> {
    let samples: Vec<(usize, &ManifestSample)> =
        manifest.samples.iter().enumerate().filter(|(_, s)| s.split == split).collect();
    samples
        .par_iter()
        .map(|&(index, s)| {
            read_feature_file(&manifest.resolve(&s.feature_path))
                .map(|stack| (s.clone(), stack))
                .map_err(|e| Error::Sample {
                    index,
                    id: s.id.clone(),
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn post_process_for(manifest: &Manifest) -> PostProcess {
    PostProcess::new(manifest.image_size[0], manifest.image_size[1])
}

/// Which population the F1 threshold was chosen on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Level {
    Pixel,
    Image,
}

impl F1Level {
    pub fn name(self) -> &'static str {
        match self {
            F1Level::Pixel => "pixel",
            F1Level::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub n_test: usize,
    pub i_auroc: f64,
    /// Absent when an anomalous test sample has no mask.
    pub p_auroc: Option<f64>,
    pub f1_threshold: f64,
    pub f1: f64,
    pub f1_level: F1Level,
}

/// Scores every test sample and computes image AUROC, pixel AUROC and the
/// best-F1 threshold. Normal samples without a mask count as all-normal.
pub fn evaluate(model: &Model<f32>, manifest: &Manifest, post: &PostProcess) -> Result<(CategoryMetrics, Vec<AnomalyResult>)> {
    let test = load_split(manifest, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Validation("manifest has no test samples".into()));
    }
    let stacks: Vec<HierarchyStack> = test.iter().map(|(_, s)| s.clone()).collect();
    let results = infer_batch(model, &stacks, &model.pipeline, post)?;

    let image = LabeledScores::new(
        results.iter().map(|r| r.image_score).collect(),
        test.iter().map(|(s, _)| s.is_anomalous()).collect(),
    )?;
    let i_auroc = auroc(&image)?;

    let masks_complete = test.iter().all(|(s, _)| !s.is_anomalous() || s.mask_path.is_some());
    let (p_auroc, f1, f1_level) = if masks_complete {
        let masks = test
            .par_iter()
            .map(|(s, _)| match &s.mask_path {
                Some(p) => read_mask(&manifest.resolve(p)),
                None => Ok(Mask::empty(post.out_h, post.out_w)),
            })
            .collect::<Result<Vec<_>>>()?;
        let maps: Vec<_> = results.iter().map(|r| r.map.clone()).collect();
        let pixels = pool_pixels(&maps, &masks)?;
        (Some(auroc(&pixels)?), best_f1_threshold(&pixels)?, F1Level::Pixel)
    } else {
        (None, best_f1_threshold(&image)?, F1Level::Image)
    };

    Ok((
        CategoryMetrics {
            category: manifest.dataset.clone(),
            n_test: test.len(),
            i_auroc,
            p_auroc,
            f1_threshold: f1.threshold,
            f1: f1.f1,
            f1_level,
        },
        results,
    ))
}
