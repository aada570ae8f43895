//! Deployed path: local features -> adapted features -> discriminator ->
//! anomaly map and image score.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{extract_local_features, HierarchyStack, PipelineConfig};
use crate::tensors::{gaussian_filter, resize_scores, FeatureTensor, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostProcess {
    pub out_h: usize,
    pub out_w: usize,
    pub sigma: f64,
    /// Take the image score from the smoothed, resized map instead of the
    /// raw one.
    pub score_after_smoothing: bool,
}

impl PostProcess {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            sigma: 4.0,
            score_after_smoothing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// Resized and smoothed map at the requested resolution.
    pub map: ScoreMap,
    pub image_score: f32,
    /// Per-location scores at the feature resolution.
    pub raw_map: ScoreMap,
}

/// Per-location anomaly scores `-D(q)` at feature resolution.
pub fn score_features(model: &Model<f32>, features: &FeatureTensor, already_adapted: bool) -> Result<ScoreMap> {
    if !model.is_finalized() {
        return Err(Error::State(
            "model is not finalized; train it or load a checkpoint first".into(),
        ));
    }
    if features.channels() != model.channels() {
        return Err(Error::Shape(format!(
            "features have {} channels, model expects {}",
            features.channels(),
            model.channels()
        )));
    }
    let d = model.discriminate(features.data(), features.locations(), already_adapted)?;
    ScoreMap::new(
        features.height(),
        features.width(),
        d.into_iter().map(|v| -v).collect(),
    )
}

/// Image score from the raw map, then bilinear resize and Gaussian smoothing.
pub fn build_result(raw: ScoreMap, post: &PostProcess) -> Result<AnomalyResult> {
    let resized = resize_scores(&raw, post.out_h, post.out_w)?;
    let map = gaussian_filter(&resized, post.sigma)?;
    let image_score = if post.score_after_smoothing {
        map.max()
    } else {
        raw.max()
    };
    Ok(AnomalyResult {
        map,
        image_score,
        raw_map: raw,
    })
}

pub fn infer_one(
    model: &Model<f32>,
    stack: &HierarchyStack,
    pipeline: &PipelineConfig,
    post: &PostProcess,
) -> Result<AnomalyResult> {
    let local = extract_local_features(stack, pipeline)?;
    let raw = score_features(model, &local, false)?;
    build_result(raw, post)
}

/// Scores every stack independently (in parallel); results keep input order.
pub fn infer_batch(
    model: &Model<f32>,
    stacks: &[HierarchyStack],
    pipeline: &PipelineConfig,
    post: &PostProcess,
) -> Result<Vec<AnomalyResult>> {
    if !model.is_finalized() {
        return Err(Error::State("model is not finalized".into()));
    }
    stacks
        .par_iter()
        .enumerate()
        .map(|(index, stack)| {
            infer_one(model, stack, pipeline, post).map_err(|e| Error::Sample {
                index,
                id: format!("#{index}"),
                source: Box::new(e),
            })
        })
        .collect()
}
