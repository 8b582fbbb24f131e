//! Binary checkpoints of the trained heads and optimizer state.
//!
//! Layout (little-endian): magic `ELCK`, format version `u32`, `m` and `d` as
//! `u32`, then `W_md, b_md, W_ed, b_ed` as row-major `f64`, the Adam step
//! counter as `u64` followed by both moment buffers in the same layout, and
//! finally a `u64` length-prefixed UTF-8 JSON metadata blob.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::HashedEncoderConfig;
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::{AdamConfig, AdamState, HeadParams};
use crate::tokenizer::AlignConfig;

const MAGIC: &[u8; 4] = b"ELCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything besides the tensors needed to reuse a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub dropout: f64,
    pub step: u64,
    pub encoder: HashedEncoderConfig,
    pub align: AlignConfig,
    pub vocab_digest: String,
    pub entity_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

fn write_f64s<W: Write + ?Sized>(out: &mut W, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    out.write_all(&bytes)?;
    Ok(())
}

fn write_params<W: Write + ?Sized>(out: &mut W, p: &HeadParams) -> Result<()> {
    for part in p.parts() {
        write_f64s(out, part)?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {}", e)))?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let b = read_exact(input, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let b = read_exact(input, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn read_params<R: Read>(input: &mut R, m: usize, d: usize) -> Result<HeadParams> {
    let mut p = HeadParams::zeros(m, d);
    for part in p.parts_mut() {
        let bytes = read_exact(input, part.len() * 8)?;
        for (dst, chunk) in part.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(p)
}

impl Checkpoint {
    pub fn write<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        let m = self.params.m();
        let d = self.params.d();
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(m as u32).to_le_bytes())?;
        out.write_all(&(d as u32).to_le_bytes())?;
        write_params(out, &self.params)?;
        out.write_all(&self.adam.t.to_le_bytes())?;
        write_params(out, &self.adam.first)?;
        write_params(out, &self.adam.second)?;
        let json = serde_json::to_vec(&self.meta)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let magic = read_exact(&mut input, 4)?;
        if magic != MAGIC {
            return Err(Error::Format("not an ELCK checkpoint".into()));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let m = read_u32(&mut input)? as usize;
        let d = read_u32(&mut input)? as usize;
        let params = read_params(&mut input, m, d)?;
        let t = read_u64(&mut input)?;
        let first = read_params(&mut input, m, d)?;
        let second = read_params(&mut input, m, d)?;
        let len = read_u64(&mut input)? as usize;
        let json = read_exact(&mut input, len)?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Checkpoint {
            params,
            adam: AdamState {
                first,
                second,
                t,
                cfg: meta.adam,
            },
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read(io_util::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = HeadParams::init(5, 3, 11);
        let mut adam = AdamState::new(5, 3, AdamConfig::default());
        adam.t = 42;
        adam.first = HeadParams::init(5, 3, 12);
        adam.second = HeadParams::init(5, 3, 13);
        Checkpoint {
            params,
            adam,
            meta: CheckpointMeta {
                lambda: 0.1,
                adam: AdamConfig::default(),
                seed: 7,
                dropout: 0.1,
                step: 42,
                encoder: HashedEncoderConfig::default(),
                align: AlignConfig::default(),
                vocab_digest: "aa".into(),
                entity_digest: "bb".into(),
                vocab_path: Some("v.txt".into()),
                entities_path: None,
                candidates_path: None,
            },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ELCK");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read(&buf[..]), Err(Error::Format(_) | Error::Json(_))));
        assert!(Checkpoint::read(&b"XXXX"[..]).is_err());
    }
}
