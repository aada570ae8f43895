//! Backbone hierarchy maps to a single local-feature map: neighbourhood
//! pooling per level, bilinear resize to the largest level, channel concat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{aggregate_neighborhood, concat_channels, resize_bilinear, FeatureTensor};

/// Per-level backbone maps, kept sorted by level index.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyStack {
    levels: Vec<(u16, FeatureTensor)>,
}

impl HierarchyStack {
    /// Builds a stack from levels in any order. Duplicate indices are rejected.
    pub fn new(mut levels: Vec<(u16, FeatureTensor)>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument(
                "hierarchy stack needs at least one level".into(),
            ));
        }
        levels.sort_by_key(|(idx, _)| *idx);
        if let Some(pair) = levels.windows(2).find(|p| p[0].0 == p[1].0) {
            return Err(Error::InvalidArgument(format!(
                "duplicate hierarchy level {}",
                pair[0].0
            )));
        }
        Ok(Self { levels })
    }

    pub fn single(level: u16, map: FeatureTensor) -> Self {
        Self {
            levels: vec![(level, map)],
        }
    }

    pub fn levels(&self) -> &[(u16, FeatureTensor)] {
        &self.levels
    }

    pub fn level(&self, index: u16) -> Option<&FeatureTensor> {
        self.levels
            .binary_search_by_key(&index, |(i, _)| *i)
            .ok()
            .map(|pos| &self.levels[pos].1)
    }

    pub fn indices(&self) -> impl Iterator<Item = u16> + '_ {
        self.levels.iter().map(|(i, _)| *i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub selected_levels: Vec<u16>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 3,
            selected_levels: vec![2, 3],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.selected_levels.is_empty() {
            return Err(Error::Config("no hierarchy levels selected".into()));
        }
        Ok(())
    }

    /// Selected levels, ascending and deduplicated.
    pub fn canonical_levels(&self) -> Vec<u16> {
        let mut levels = self.selected_levels.clone();
        levels.sort_unstable();
        levels.dedup();
        levels
    }
}

/// Produces the `H0 x W0 x sum(C_l)` local-feature map for one sample.
///
/// `(H0, W0)` is the spatial size of the selected level with the most
/// locations; ties go to the lowest level index.
pub fn extract_local_features(
    stack: &HierarchyStack,
    config: &PipelineConfig,
) -> Result<FeatureTensor> {
    config.validate()?;
    let levels = config.canonical_levels();
    let maps = levels
        .iter()
        .map(|&l| stack.level(l).ok_or(Error::MissingLevel(l)))
        .collect::<Result<Vec<_>>>()?;

    let mut target = maps[0];
    for m in &maps[1..] {
        if m.locations() > target.locations() {
            target = m;
        }
    }
    let (h0, w0) = (target.height(), target.width());

    let pooled = maps
        .iter()
        .map(|m| {
            let z = aggregate_neighborhood(m, config.patch_size)?;
            resize_bilinear(&z, h0, w0)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&pooled)
}
