use nalgebra::DMatrix;

use super::{FeatureBank, NormalizationMode};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// One backbone stage's activation map, stored row-major with channels last
/// (`values[(i * width + j) * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl StageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("stage tensor needs at least one channel"));
        }
        if values.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("stage tensor contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A pooled stage embedding, or the concatenation of several.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("feature vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature vector contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Global average pooling over the spatial axes of a stage tensor.
///
/// Each channel is accumulated with compensated summation and divided by
/// the spatial area once at the end.
pub fn pool_stage(t: &StageTensor) -> Result<FeatureVector> {
    let area = t.height * t.width;
    if area == 0 {
        return Err(Error::invalid(format!(
            "cannot pool a zero-area {}x{} tensor",
            t.height, t.width
        )));
    }
    let mut acc = vec![CompensatedSum::default(); t.channels];
    for cell in t.values.chunks_exact(t.channels) {
        for (a, &v) in acc.iter_mut().zip(cell) {
            a.add(v);
        }
    }
    let area = area as f64;
    FeatureVector::new(acc.iter().map(|a| a.value() / area).collect())
}

/// Concatenates stage embeddings in list order.
pub fn concat_stages(stages: &[FeatureVector]) -> Result<FeatureVector> {
    if stages.is_empty() {
        return Err(Error::invalid("no stages to concatenate"));
    }
    let total = stages.iter().map(FeatureVector::dims).sum();
    let mut out = Vec::with_capacity(total);
    for s in stages {
        out.extend_from_slice(&s.0);
    }
    Ok(FeatureVector(out))
}

/// A fitted normalization. L2 and identity carry no state; z-score keeps the
/// fitting bank's per-feature mean and standard deviation so the same
/// transform can be applied to that client's held-out data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mode: NormalizationMode,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(bank: &FeatureBank, mode: NormalizationMode) -> Self {
        let (mean, std) = match mode {
            NormalizationMode::ZScore => column_moments(bank.features()),
            _ => (Vec::new(), Vec::new()),
        };
        Self { mode, mean, std }
    }

    pub fn mode(&self) -> NormalizationMode {
        self.mode
    }

    /// Applies the transform to a raw (not yet normalized) bank.
    pub fn apply(&self, bank: &FeatureBank) -> Result<FeatureBank> {
        if let Some(mode) = bank.normalization() {
            return Err(Error::InvalidState(format!(
                "bank {} is already normalized ({mode})",
                bank.client_id()
            )));
        }
        let mut x = bank.features().clone();
        match self.mode {
            NormalizationMode::L2 => {
                for mut row in x.row_iter_mut() {
                    let norm = row.norm();
                    if norm > 0.0 {
                        row /= norm;
                    }
                }
            }
            NormalizationMode::ZScore => {
                if self.mean.len() != x.ncols() {
                    return Err(Error::incompatible(format!(
                        "normalizer fitted on {} features, bank has {}",
                        self.mean.len(),
                        x.ncols()
                    )));
                }
                for (j, mut col) in x.column_iter_mut().enumerate() {
                    let (m, s) = (self.mean[j], self.std[j]);
                    for v in col.iter_mut() {
                        *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
                    }
                }
            }
            NormalizationMode::Identity => {}
        }
        Ok(bank.with_features(x).with_normalization(Some(self.mode)))
    }
}

fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows();
    if n == 0 {
        return (vec![0.0; x.ncols()], vec![0.0; x.ncols()]);
    }
    x.column_iter()
        .map(|col| {
            let mut s = CompensatedSum::default();
            col.iter().for_each(|&v| s.add(v));
            let mean = s.value() / n as f64;
            let mut ss = CompensatedSum::default();
            col.iter().for_each(|&v| ss.add((v - mean) * (v - mean)));
            (mean, (ss.value() / n as f64).sqrt())
        })
        .unzip()
}

/// Fits `mode` on the bank itself and applies it.
pub fn normalize_bank(bank: &FeatureBank, mode: NormalizationMode) -> Result<FeatureBank> {
    if bank.is_normalized() {
        return Err(Error::InvalidState(format!(
            "bank {} is already normalized",
            bank.client_id()
        )));
    }
    Normalizer::fit(bank, mode).apply(bank)
}
