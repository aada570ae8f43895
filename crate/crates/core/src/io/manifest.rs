//! JSON dataset manifest binding feature files to labels and masks.
//!
//! ```json
//! {
//!   "dataset": "bottle",
//!   "image_size": [224, 224],
//!   "samples": [
//!     {"id": "train/000", "split": "train", "label": 0, "feature_path": "f/000.snft"},
//!     {"id": "test/007", "split": "test", "label": 1,
//!      "feature_path": "f/t007.snft", "mask_path": "m/t007.png"}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_file};
use crate::error::{Error, Result};
use crate::evaluation::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub split: Split,
    /// 0 normal, 1 anomalous.
    pub label: u8,
    pub feature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ManifestSample {
    pub fn is_anomalous(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    /// `[H, W]` of the source images; anomaly maps are produced at this size.
    pub image_size: [usize; 2],
    pub samples: Vec<ManifestSample>,
    /// Free-form provenance written by generators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(dataset: impl Into<String>, image_size: [usize; 2], samples: Vec<ManifestSample>) -> Self {
        Self {
            dataset: dataset.into(),
            image_size,
            samples,
            meta: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Validation(format!(
                "image_size must be positive, got {:?}",
                self.image_size
            )));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {:?}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Validation(format!(
                    "sample {:?}: label must be 0 or 1, got {}",
                    s.id, s.label
                )));
            }
            if s.split == Split::Train && s.label != 0 {
                return Err(Error::Protocol(format!(
                    "training sample {:?} is labelled anomalous; training uses normal samples only",
                    s.id
                )));
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        for s in &self.samples {
            let paths = std::iter::once(&s.feature_path).chain(s.mask_path.as_ref());
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "sample {:?}: {} does not exist",
                        s.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses, validates and checks that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let mut m: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    m.check_files()?;
    Ok(m)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::Internal(e.to_string()))?;
    json.push(b'\n');
    atomic_write(path, &json)
}

/// Loads a PNG mask; any nonzero pixel is anomalous.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Mask::new(h as usize, w as usize, gray.pixels().map(|p| p.0[0] != 0).collect())
}
