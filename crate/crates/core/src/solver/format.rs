//! `BLWT` weight files: the upload unit whose length drives the
//! communication accounting.
//!
//! Layout (little-endian): `"BLWT" | u16 version | u32 header length |
//! JSON header {d, C, lambda, normalization_mode, bias} | d·C f64, row-major`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::BlWeights;
use crate::bank::NormalizationMode;
use crate::container::{frame_len, read_frame, write_frame};
use crate::error::{ParseError, Result};

pub const BLWT_MAGIC: &[u8; 4] = b"BLWT";
pub const BLWT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d: usize,
    #[serde(rename = "C")]
    num_classes: usize,
    lambda: f64,
    normalization_mode: NormalizationMode,
    #[serde(default)]
    bias: bool,
}

fn header(w: &BlWeights) -> Header {
    Header {
        d: w.dim(),
        num_classes: w.num_classes(),
        lambda: w.lambda(),
        normalization_mode: w.normalization_mode(),
        bias: w.has_bias(),
    }
}

pub fn encode_blwt(w: &BlWeights) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(blwt_len(w)?);
    write_frame(&mut out, BLWT_MAGIC, BLWT_VERSION, &header(w))?;
    for row in w.values().row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Exact serialized length of `w` without building the buffer.
pub fn blwt_len(w: &BlWeights) -> Result<usize> {
    Ok(frame_len(&header(w))? + w.dim() * w.num_classes() * 8)
}

pub fn decode_blwt(bytes: &[u8]) -> Result<BlWeights> {
    let (h, mut cur): (Header, _) = read_frame(bytes, BLWT_MAGIC, BLWT_VERSION)?;
    let count = h
        .d
        .checked_mul(h.num_classes)
        .ok_or_else(|| ParseError::Header(format!("d={} C={} overflows", h.d, h.num_classes)))?;
    let values = cur.f64s(count, "weight matrix")?;
    cur.finish()?;
    let m = DMatrix::from_row_slice(h.d, h.num_classes, &values);
    BlWeights::with_bias(m, h.lambda, h.normalization_mode, h.bias)
        .map_err(|e| ParseError::Inconsistent(e.to_string()).into())
}

pub fn write_blwt(w: &BlWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_blwt(w)?)?;
    Ok(())
}

pub fn read_blwt(path: impl AsRef<Path>) -> Result<BlWeights> {
    decode_blwt(&fs::read(path)?)
}
