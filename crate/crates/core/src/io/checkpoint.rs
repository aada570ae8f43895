//! `SNCK`: a trained model plus the configuration that produced it.
//!
//! ```text
//! "SNCK" | u16 version=1 | u32 header_len | header_len bytes of JSON
//! 10 x (u32 count | count f32):
//!   adaptor weight, adaptor weight2, w1, b1, bn_gamma, bn_beta,
//!   bn_running_mean, bn_running_var, w2, b2
//! u32 crc32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, dim_u32, put_f32s, put_u16, put_u32, read_file, seal, Reader};
use crate::error::{Error, ParseError, Result};
use crate::model::{Adaptor, AdaptorVariant, Discriminator, Model};
use crate::pipeline::PipelineConfig;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"SNCK";
const VERSION: u16 = 1;
const TENSORS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Absent for models that were never trained through [`crate::training`].
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    pipeline: PipelineConfig,
    adaptor: AdaptorVariant,
    channels: usize,
    hidden: usize,
    adaptor_leaky_slope: f32,
    discriminator_leaky_slope: f32,
    bn_momentum: f32,
    bn_eps: f32,
    finalized: bool,
    train_config: Option<TrainConfig>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let d = &m.discriminator;
    let header = Header {
        pipeline: m.pipeline.clone(),
        adaptor: m.adaptor.variant(),
        channels: m.channels(),
        hidden: d.hidden(),
        adaptor_leaky_slope: m.adaptor.leaky_slope,
        discriminator_leaky_slope: d.leaky_slope,
        bn_momentum: d.bn_momentum,
        bn_eps: d.bn_eps,
        finalized: m.is_finalized(),
        train_config: ck.train_config.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("checkpoint header: {e}")))?;

    let b2 = [d.b2];
    let tensors: [&[f32]; TENSORS] = [
        &m.adaptor.weight,
        &m.adaptor.weight2,
        &d.w1,
        &d.b1,
        &d.bn_gamma,
        &d.bn_beta,
        &d.bn_running_mean,
        &d.bn_running_var,
        &d.w2,
        &b2,
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, dim_u32(json.len(), "header length")?);
    out.extend_from_slice(&json);
    for t in tensors {
        put_u32(&mut out, dim_u32(t.len(), "tensor length")?);
        put_f32s(&mut out, t);
    }
    Ok(seal(out))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| ParseError::Header(e.to_string()))?;
    let mut tensors = Vec::with_capacity(TENSORS);
    for _ in 0..TENSORS {
        let n = r.u32()? as usize;
        tensors.push(r.finite_f32s(n)?);
    }
    r.finish()?;

    let bad = |e: Error| ParseError::Header(e.to_string());
    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    let mut adaptor = Adaptor::from_parts(header.adaptor, header.channels, next(), next()).map_err(bad)?;
    adaptor.leaky_slope = header.adaptor_leaky_slope;

    let mut d = Discriminator::zeroed(header.channels, header.hidden);
    d.w1 = next();
    d.b1 = next();
    d.bn_gamma = next();
    d.bn_beta = next();
    d.bn_running_mean = next();
    d.bn_running_var = next();
    d.w2 = next();
    let b2 = next();
    if b2.len() != 1 {
        return Err(ParseError::Header(format!("b2 must hold 1 value, got {}", b2.len())));
    }
    d.b2 = b2[0];
    d.leaky_slope = header.discriminator_leaky_slope;
    d.bn_momentum = header.bn_momentum;
    d.bn_eps = header.bn_eps;

    let model = Model::from_parts(header.pipeline, adaptor, d, header.finalized).map_err(bad)?;
    if let Some(tc) = &header.train_config {
        tc.validate().map_err(bad)?;
    }
    Ok(Checkpoint {
        model,
        train_config: header.train_config,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    decode_checkpoint(&bytes).map_err(|e| Error::parse(path, e))
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint(variant: AdaptorVariant) -> Checkpoint {
        let mut model = Model::new(PipelineConfig::default(), variant, 3, 5, 11).unwrap();
        model.discriminator.b2 = -0.125;
        model.discriminator.bn_running_var[2] = 0.37;
        if !model.adaptor.weight.is_empty() {
            model.adaptor.weight[1] = 0.1 + f32::EPSILON;
        }
        model.finalize();
        Checkpoint {
            model,
            train_config: Some(TrainConfig::default()),
        }
    }

    #[test]
    fn round_trip_every_variant() {
        for v in [AdaptorVariant::Identity, AdaptorVariant::Linear, AdaptorVariant::Mlp] {
            let ck = checkpoint(v);
            let bytes = encode_checkpoint(&ck).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn untrained_config_survives() {
        let mut ck = checkpoint(AdaptorVariant::Linear);
        ck.train_config = None;
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap(), ck);
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode_checkpoint(&checkpoint(AdaptorVariant::Linear)).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 6;
        flipped[last] ^= 0x80;
        assert!(matches!(decode_checkpoint(&flipped), Err(ParseError::CrcMismatch { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 5]),
            Err(ParseError::Truncated { .. })
        ));
        assert!(matches!(decode_checkpoint(b"SNFT\x01\x00"), Err(ParseError::BadMagic { .. })));
    }
}
