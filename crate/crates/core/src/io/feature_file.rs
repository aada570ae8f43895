//! `SNFT`: a stack of hierarchy-level feature maps.
//!
//! ```text
//! "SNFT" | u16 version=1 | u16 level_count
//! per level: u16 index | u32 H | u32 W | u32 C | H*W*C f32
//! u32 crc32
//! ```

use std::path::Path;

use super::{atomic_write, dim_u32, put_f32s, put_u16, put_u32, read_file, seal, Reader};
use crate::error::{Error, ParseError, Result};
use crate::pipeline::HierarchyStack;
use crate::tensors::FeatureTensor;

const MAGIC: &[u8; 4] = b"SNFT";
const VERSION: u16 = 1;

pub fn encode_feature_file(stack: &HierarchyStack) -> Result<Vec<u8>> {
    let levels = stack.levels();
    let count = u16::try_from(levels.len())
        .map_err(|_| Error::InvalidArgument(format!("{} levels exceed u16", levels.len())))?;
    let payload: usize = levels.iter().map(|(_, t)| 14 + 4 * t.data().len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u16(&mut out, count);
    for (idx, t) in levels {
        put_u16(&mut out, *idx);
        put_u32(&mut out, dim_u32(t.height(), "height")?);
        put_u32(&mut out, dim_u32(t.width(), "width")?);
        put_u32(&mut out, dim_u32(t.channels(), "channels")?);
        put_f32s(&mut out, t.data());
    }
    Ok(seal(out))
}

/// Structure is parsed before the checksum so a short file reports
/// truncation rather than a CRC mismatch.
pub fn decode_feature_file(bytes: &[u8]) -> std::result::Result<HierarchyStack, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let count = r.u16()?;
    if count == 0 {
        return Err(ParseError::Header("no levels".into()));
    }
    let mut levels: Vec<(u16, FeatureTensor)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let idx = r.u16()?;
        if let Some((prev, _)) = levels.last() {
            if idx <= *prev {
                return Err(ParseError::LevelOrder { prev: *prev, next: idx });
            }
        }
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        if h == 0 || w == 0 || c == 0 {
            return Err(ParseError::Header(format!("level {idx} has a zero dimension ({h}x{w}x{c})")));
        }
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| ParseError::Header(format!("level {idx} size overflows")))?;
        let data = r.finite_f32s(n)?;
        let t = FeatureTensor::new(h, w, c, data).map_err(|e| ParseError::Header(e.to_string()))?;
        levels.push((idx, t));
    }
    r.finish()?;
    HierarchyStack::new(levels).map_err(|e| ParseError::Header(e.to_string()))
}

pub fn read_feature_file(path: &Path) -> Result<HierarchyStack> {
    let bytes = read_file(path)?;
    decode_feature_file(&bytes).map_err(|e| Error::parse(path, e))
}

pub fn write_feature_file(stack: &HierarchyStack, path: &Path) -> Result<()> {
    atomic_write(path, &encode_feature_file(stack)?)
}
