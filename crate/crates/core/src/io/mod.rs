//! On-disk formats. Every multi-byte integer and float is little-endian and
//! every binary file ends in a CRC32 (IEEE) of all preceding bytes.

mod anomaly_map;
mod checkpoint;
mod feature_file;
mod manifest;

pub use anomaly_map::{
    decode_raw_map, encode_raw_map, read_raw_map, write_anomaly_map, GraySidecar, MapFormat,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use feature_file::{decode_feature_file, encode_feature_file, read_feature_file, write_feature_file};
pub use manifest::{read_manifest, read_mask, write_manifest, Manifest, ManifestSample, Split};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, ParseError, Result};

/// Writes to a temporary sibling and renames it over `path`, so readers
/// never see a partial file. Concurrent writers to one path are not
/// coordinated.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Appends the CRC32 of everything written so far.
pub(crate) fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ParseError> {
        if n > self.remaining() {
            return Err(ParseError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> std::result::Result<(), ParseError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &found != expected {
            return Err(ParseError::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> std::result::Result<f32, ParseError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `count` floats; rejects NaN and infinities.
    pub(crate) fn finite_f32s(&mut self, count: usize) -> std::result::Result<Vec<f32>, ParseError> {
        let nbytes = count.checked_mul(4).ok_or(ParseError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
            len: self.bytes.len(),
        })?;
        let raw = self.take(nbytes)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ParseError::NonFinite);
        }
        Ok(values)
    }

    /// Consumes the trailing CRC and checks it covers every earlier byte
    /// and that nothing follows it.
    pub(crate) fn finish(mut self) -> std::result::Result<(), ParseError> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if self.remaining() != 0 {
            return Err(ParseError::TrailingBytes(self.remaining()));
        }
        let computed = crc32fast::hash(&self.bytes[..body_end]);
        if stored != computed {
            return Err(ParseError::CrcMismatch { stored, computed });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn atomic_write_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.bin");
        match atomic_write(&p, b"x") {
            Err(Error::Io { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reader_truncation_reports_offset() {
        let mut r = Reader::new(&[1, 2, 3]);
        assert_eq!(r.u16().unwrap(), 0x0201);
        assert_eq!(
            r.u32(),
            Err(ParseError::Truncated {
                offset: 2,
                needed: 4,
                len: 3
            })
        );
    }
}
