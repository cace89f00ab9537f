//! `FBNK` feature-bank files.
//!
//! Layout (little-endian): `"FBNK" | u16 version | u32 header length |
//! JSON header | n·d f64 features, row-major | n u32 labels`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{FeatureBank, NormalizationMode};
use crate::container::{read_frame, write_frame};
use crate::error::{ParseError, Result};

pub const FBNK_MAGIC: &[u8; 4] = b"FBNK";
pub const FBNK_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    client_id: String,
    n: usize,
    d: usize,
    #[serde(rename = "C")]
    num_classes: usize,
    #[serde(default)]
    stage_dims: Vec<usize>,
    #[serde(default)]
    backbone_id: String,
    normalized: bool,
    #[serde(default)]
    normalization_mode: Option<NormalizationMode>,
}

pub fn encode_bank(bank: &FeatureBank) -> Result<Vec<u8>> {
    let header = Header {
        client_id: bank.client_id().to_owned(),
        n: bank.len(),
        d: bank.dim(),
        num_classes: bank.num_classes(),
        stage_dims: bank.stage_dims().to_vec(),
        backbone_id: bank.backbone_id().to_owned(),
        normalized: bank.is_normalized(),
        normalization_mode: bank.normalization(),
    };
    let mut out = Vec::with_capacity(64 + bank.len() * (bank.dim() * 8 + 4));
    write_frame(&mut out, FBNK_MAGIC, FBNK_VERSION, &header)?;
    for row in bank.features().row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in bank.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<FeatureBank> {
    let (h, mut cur): (Header, _) = read_frame(bytes, FBNK_MAGIC, FBNK_VERSION)?;
    if h.normalized != h.normalization_mode.is_some() {
        return Err(ParseError::Inconsistent(format!(
            "normalized={} but normalization_mode={:?}",
            h.normalized, h.normalization_mode
        ))
        .into());
    }
    let count = h
        .n
        .checked_mul(h.d)
        .ok_or_else(|| ParseError::Header(format!("n={} d={} overflows", h.n, h.d)))?;
    let values = cur.f64s(count, "feature matrix")?;
    let raw = cur.take(h.n * 4, "labels")?;
    let labels: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    cur.finish()?;

    if let Some((i, l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= h.num_classes)
    {
        return Err(ParseError::Inconsistent(format!(
            "label {l} at row {i} is outside [0, {})",
            h.num_classes
        ))
        .into());
    }

    let features = DMatrix::from_row_slice(h.n, h.d, &values);
    let bank = FeatureBank::new(h.client_id, h.num_classes, features, labels)
        .and_then(|b| b.with_stage_dims(h.stage_dims))
        .map_err(|e| ParseError::Inconsistent(e.to_string()))?;
    Ok(bank
        .with_backbone(h.backbone_id)
        .with_normalization(h.normalization_mode))
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_bank(bank)?)?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    decode_bank(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn sample() -> FeatureBank {
        let rows: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        FeatureBank::from_rows("site-a", 2, 4, &rows, vec![0, 1, 1])
            .unwrap()
            .with_stage_dims(vec![1, 3])
            .unwrap()
            .with_backbone("resnet50")
    }

    #[test]
    fn roundtrip_small_bank() {
        let b = sample();
        assert_eq!(decode_bank(&encode_bank(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fbnk");
        let b = super::super::normalize_bank(&sample(), NormalizationMode::ZScore).unwrap();
        write_bank(&b, &path).unwrap();
        assert_eq!(read_bank(&path).unwrap(), b);
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let mut bytes = encode_bank(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_bank(&bytes),
            Err(Error::Parse(ParseError::Inconsistent(_)))
        ));
    }

    #[test]
    fn truncated_mid_matrix() {
        let bytes = encode_bank(&sample()).unwrap();
        let cut = bytes.len() - 12 * 4 - 4;
        assert!(matches!(
            decode_bank(&bytes[..cut]),
            Err(Error::Parse(ParseError::Truncated { what: "feature matrix", .. }))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_bank(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_bank(&bytes), Err(Error::Parse(ParseError::BadMagic { .. }))));
        let mut bytes = encode_bank(&sample()).unwrap();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            decode_bank(&bytes),
            Err(Error::Parse(ParseError::UnsupportedVersion { found: 2, supported: 1 }))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_bank(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_bank(&bytes), Err(Error::Parse(ParseError::TrailingBytes(1)))));
    }

    #[test]
    fn header_is_documented_json() {
        let bytes = encode_bank(&sample()).unwrap();
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
        assert_eq!(v["n"], 3);
        assert_eq!(v["d"], 4);
        assert_eq!(v["C"], 2);
        assert_eq!(v["normalized"], false);
        assert!(v["normalization_mode"].is_null());
        assert_eq!(bytes.len(), 10 + len + 3 * 4 * 8 + 3 * 4);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            n in 0usize..6, d in 1usize..6, c in 2usize..5,
            bits in proptest::collection::vec(any::<u64>(), 36),
            labels in proptest::collection::vec(any::<u32>(), 6),
        ) {
            // Arbitrary finite bit patterns, including subnormals and -0.0.
            let vals: Vec<f64> = bits[..n * d]
                .iter()
                .map(|&b| { let v = f64::from_bits(b); if v.is_finite() { v } else { -0.0 } })
                .collect();
            let labels: Vec<u32> = labels[..n].iter().map(|l| l % c as u32).collect();
            let b = FeatureBank::from_rows("p", c, d, &vals, labels).unwrap();
            let back = decode_bank(&encode_bank(&b).unwrap()).unwrap();
            let same = back.features().iter().zip(b.features().iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.labels(), b.labels());
        }
    }
}
