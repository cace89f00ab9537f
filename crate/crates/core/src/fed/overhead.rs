use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OVERHEAD_SCHEMA: &str = "feddbl.overhead/1";

/// Bytes of a `d × C` weight matrix with `elem_bytes`-wide entries plus a
/// fixed header. With `header_bytes = 0` this is the bare payload size.
pub fn weight_bytes(d: u64, classes: u64, elem_bytes: u64, header_bytes: u64) -> Result<u64> {
    if d == 0 || classes == 0 || elem_bytes == 0 {
        return Err(Error::invalid("d, classes and elem_bytes must be positive"));
    }
    d.checked_mul(classes)
        .and_then(|v| v.checked_mul(elem_bytes))
        .and_then(|v| v.checked_add(header_bytes))
        .ok_or_else(|| Error::invalid("byte count overflows u64"))
}

/// How many times more a baseline uploads over `baseline_rounds` rounds than
/// a single upload of `feddbl_bytes`.
pub fn overhead_ratio(baseline_model_bytes: u64, baseline_rounds: u64, feddbl_bytes: u64) -> Result<f64> {
    if baseline_model_bytes == 0 || baseline_rounds == 0 || feddbl_bytes == 0 {
        return Err(Error::invalid("overhead ratio inputs must be positive"));
    }
    Ok(baseline_model_bytes as f64 * baseline_rounds as f64 / feddbl_bytes as f64)
}

/// Human-readable size with decimal units (1 KB = 1000 B), one decimal.
pub fn format_decimal_size(bytes: u64) -> String {
    const UNITS: [(&str, f64); 4] = [("GB", 1e9), ("MB", 1e6), ("KB", 1e3), ("B", 1.0)];
    let b = bytes as f64;
    for (unit, scale) in UNITS {
        if b >= scale && scale > 1.0 {
            return format!("{:.1}{unit}", b / scale);
        }
    }
    format!("{bytes}B")
}

/// Per-client upload accounting for a federation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub schema: String,
    pub rounds: u64,
    pub per_client_upload_bytes: BTreeMap<String, u64>,
    /// Largest single-round upload of any client.
    pub per_round_bytes_per_client: u64,
    pub total_upload_bytes_per_client: u64,
    /// `d · C · 8`: the weight payload without framing, comparable to
    /// published model-size figures.
    pub payload_bytes: u64,
    pub payload_human: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison_baseline_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_ratio: Option<f64>,
    /// Ciphertext upload per client when the encrypted path is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encrypted_upload_bytes_per_client: Option<u64>,
}

impl OverheadReport {
    pub fn new(per_client_upload_bytes: BTreeMap<String, u64>, rounds: u64, payload_bytes: u64) -> Self {
        let per_round = per_client_upload_bytes.values().copied().max().unwrap_or(0);
        Self {
            schema: OVERHEAD_SCHEMA.to_owned(),
            rounds,
            per_client_upload_bytes,
            per_round_bytes_per_client: per_round,
            total_upload_bytes_per_client: per_round * rounds,
            payload_bytes,
            payload_human: format_decimal_size(payload_bytes),
            comparison_baseline_bytes: None,
            baseline_ratio: None,
            encrypted_upload_bytes_per_client: None,
        }
    }

    /// Records a multi-round baseline (model bytes × rounds) and the ratio of
    /// its total upload to this run's per-client total.
    pub fn with_baseline(mut self, model_bytes: u64, rounds: u64) -> Result<Self> {
        let total = model_bytes
            .checked_mul(rounds)
            .ok_or_else(|| Error::invalid("baseline bytes overflow"))?;
        self.baseline_ratio = Some(overhead_ratio(model_bytes, rounds, self.total_upload_bytes_per_client)?);
        self.comparison_baseline_bytes = Some(total);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_bytes_examples() {
        assert_eq!(weight_bytes(3840, 9, 8, 0).unwrap(), 276_480);
        assert_eq!(weight_bytes(768, 9, 8, 0).unwrap(), 55_296);
        assert_eq!(weight_bytes(1, 1, 8, 0).unwrap(), 8);
        assert_eq!(weight_bytes(1, 1, 8, 10).unwrap(), 18);
        assert!(weight_bytes(0, 9, 8, 0).is_err());
    }

    #[test]
    fn ratios() {
        let r = overhead_ratio(94_400_000, 50, 276_480).unwrap();
        assert!(r > 17_000.0 && (r - 17_071.759_259).abs() < 1e-5, "{r}");
        let e = overhead_ratio(34_200_000, 50, 55_296).unwrap();
        assert!((e - 30_924.48).abs() < 0.01, "{e}");
        assert_eq!(overhead_ratio(10, 1, 10).unwrap(), 1.0);
        assert!(overhead_ratio(0, 1, 1).is_err());
    }

    #[test]
    fn decimal_sizes() {
        assert_eq!(format_decimal_size(276_480), "276.5KB");
        assert_eq!(format_decimal_size(94_400_000), "94.4MB");
        assert_eq!(format_decimal_size(8), "8B");
    }

    #[test]
    fn report_totals() {
        let mut m = BTreeMap::new();
        m.insert("a".to_owned(), 100);
        m.insert("b".to_owned(), 100);
        let r = OverheadReport::new(m, 1, 80).with_baseline(1000, 50).unwrap();
        assert_eq!(r.total_upload_bytes_per_client, 100);
        assert_eq!(r.comparison_baseline_bytes, Some(50_000));
        assert_eq!(r.baseline_ratio, Some(500.0));
    }
}
