//! Anomaly-map outputs: lossless `SNAM` files and normalised grayscale PNGs.
//!
//! ```text
//! "SNAM" | u16 version=1 | f32 image_score
//! u32 H | u32 W | H*W f32 map
//! u32 h | u32 w | h*w f32 raw map
//! u32 crc32
//! ```

use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{atomic_write, dim_u32, put_f32s, put_u16, put_u32, read_file, seal, Reader};
use crate::error::{Error, ParseError, Result};
use crate::inference::AnomalyResult;
use crate::tensors::ScoreMap;

const MAGIC: &[u8; 4] = b"SNAM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Raw,
    Gray,
    Both,
}

impl std::str::FromStr for MapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "gray" => Ok(Self::Gray),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown map format {other:?}"))),
        }
    }
}

/// Stored next to a grayscale map; `score = min + pixel / 255 * (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraySidecar {
    pub min: f32,
    pub max: f32,
    pub image_score: f32,
    /// `min == max`; the image is all zeros.
    pub degenerate: bool,
}

impl GraySidecar {
    pub fn reconstruct(&self, pixel: u8) -> f32 {
        if self.degenerate {
            return self.min;
        }
        (f64::from(self.min) + f64::from(pixel) / 255.0 * (f64::from(self.max) - f64::from(self.min))) as f32
    }
}

fn put_map(out: &mut Vec<u8>, map: &ScoreMap) -> Result<()> {
    put_u32(out, dim_u32(map.height(), "map height")?);
    put_u32(out, dim_u32(map.width(), "map width")?);
    put_f32s(out, map.data());
    Ok(())
}

fn get_map(r: &mut Reader<'_>) -> std::result::Result<ScoreMap, ParseError> {
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| ParseError::Header("map size overflows".into()))?;
    let data = r.finite_f32s(n)?;
    ScoreMap::new(h, w, data).map_err(|e| ParseError::Header(e.to_string()))
}

pub fn encode_raw_map(result: &AnomalyResult) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(22 + 4 * (result.map.data().len() + result.raw_map.data().len()) + 4);
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_f32s(&mut out, &[result.image_score]);
    put_map(&mut out, &result.map)?;
    put_map(&mut out, &result.raw_map)?;
    Ok(seal(out))
}

pub fn decode_raw_map(bytes: &[u8]) -> std::result::Result<AnomalyResult, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let image_score = r.f32()?;
    if !image_score.is_finite() {
        return Err(ParseError::NonFinite);
    }
    let map = get_map(&mut r)?;
    let raw_map = get_map(&mut r)?;
    r.finish()?;
    Ok(AnomalyResult {
        map,
        image_score,
        raw_map,
    })
}

pub fn read_raw_map(path: &Path) -> Result<AnomalyResult> {
    let bytes = read_file(path)?;
    decode_raw_map(&bytes).map_err(|e| Error::parse(path, e))
}

/// Per-image min-max scaling to 8 bits.
pub fn to_gray(map: &ScoreMap, image_score: f32) -> (Vec<u8>, GraySidecar) {
    let (min, max) = (map.min(), map.max());
    let degenerate = min == max;
    let range = f64::from(max) - f64::from(min);
    let pixels = map
        .data()
        .iter()
        .map(|&v| {
            if degenerate {
                0
            } else {
                ((f64::from(v) - f64::from(min)) / range * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    (
        pixels,
        GraySidecar {
            min,
            max,
            image_score,
            degenerate,
        },
    )
}

/// Writes `<stem>.snam` and/or `<stem>.png` + `<stem>.json`; returns the
/// paths written.
pub fn write_anomaly_map(result: &AnomalyResult, stem: &Path, format: MapFormat) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if matches!(format, MapFormat::Raw | MapFormat::Both) {
        let p = stem.with_extension("snam");
        atomic_write(&p, &encode_raw_map(result)?)?;
        written.push(p);
    }
    if matches!(format, MapFormat::Gray | MapFormat::Both) {
        let (pixels, sidecar) = to_gray(&result.map, result.image_score);
        let (h, w) = (result.map.height(), result.map.width());
        let png_path = stem.with_extension("png");
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(&mut png)
            .write_image(&pixels, dim_u32(w, "width")?, dim_u32(h, "height")?, ExtendedColorType::L8)
            .map_err(|e| Error::Image {
                path: png_path.clone(),
                message: e.to_string(),
            })?;
        atomic_write(&png_path, &png)?;
        written.push(png_path);

        let json_path = stem.with_extension("json");
        let mut json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Internal(e.to_string()))?;
        json.push(b'\n');
        atomic_write(&json_path, &json)?;
        written.push(json_path);
    }
    Ok(written)
}
