//! Client feature banks: the pooled, concatenated deep features of one
//! client's dataset together with its labels.

mod format;
mod split;
mod synth;
mod transform;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{decode_bank, encode_bank, read_bank, write_bank, FBNK_MAGIC, FBNK_VERSION};
pub use split::{partition_stratified, split_train_test, subsample};
pub use synth::{gen_synthetic_federation, SyntheticFederation, SyntheticSpec};
pub use transform::{concat_stages, normalize_bank, pool_stage, FeatureVector, Normalizer, StageTensor};

/// How raw pooled features are transformed before the closed-form solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// Each sample scaled to unit Euclidean norm; all-zero rows stay zero.
    #[default]
    L2,
    /// Per-feature standardization with the client's own mean and
    /// population standard deviation.
    ZScore,
    Identity,
}

impl NormalizationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormalizationMode::L2 => "l2",
            NormalizationMode::ZScore => "zscore",
            NormalizationMode::Identity => "identity",
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(NormalizationMode::L2),
            "zscore" | "z-score" => Ok(NormalizationMode::ZScore),
            "identity" | "none" => Ok(NormalizationMode::Identity),
            other => Err(Error::invalid(format!("unknown normalization mode {other:?}"))),
        }
    }
}

/// A client's local feature matrix (`n × d`, one row per sample) and labels.
///
/// Instances are validated on construction and immutable afterwards; the
/// transforms in this module return new banks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    client_id: String,
    num_classes: usize,
    features: DMatrix<f64>,
    labels: Vec<u32>,
    stage_dims: Vec<usize>,
    backbone_id: String,
    normalization: Option<NormalizationMode>,
}

impl FeatureBank {
    pub fn new(
        client_id: impl Into<String>,
        num_classes: usize,
        features: DMatrix<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let bank = Self {
            client_id: client_id.into(),
            num_classes,
            features,
            labels,
            stage_dims: Vec::new(),
            backbone_id: String::new(),
            normalization: None,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Builds a bank from row-major feature data.
    pub fn from_rows(
        client_id: impl Into<String>,
        num_classes: usize,
        dim: usize,
        rows: &[f64],
        labels: Vec<u32>,
    ) -> Result<Self> {
        if dim == 0 || rows.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} values cannot form {} rows of dimension {dim}",
                rows.len(),
                labels.len()
            )));
        }
        let features = DMatrix::from_row_slice(labels.len(), dim, rows);
        Self::new(client_id, num_classes, features, labels)
    }

    pub fn with_stage_dims(mut self, stage_dims: Vec<usize>) -> Result<Self> {
        self.stage_dims = stage_dims;
        self.validate()?;
        Ok(self)
    }

    pub fn with_backbone(mut self, backbone_id: impl Into<String>) -> Self {
        self.backbone_id = backbone_id.into();
        self
    }

    pub fn with_client_id(mut self, client_id: impl Into<String>) -> Self {
        self.client_id = client_id.into();
        self
    }

    pub(crate) fn with_normalization(mut self, mode: Option<NormalizationMode>) -> Self {
        self.normalization = mode;
        self
    }

    pub(crate) fn with_features(&self, features: DMatrix<f64>) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "a bank needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.features.ncols() == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if self.features.nrows() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature at flat index {i}")));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.num_classes)
        {
            return Err(Error::invalid(format!(
                "label {l} at row {i} is outside [0, {})",
                self.num_classes
            )));
        }
        if !self.stage_dims.is_empty() && self.stage_dims.iter().sum::<usize>() != self.dim() {
            return Err(Error::invalid(format!(
                "stage dims {:?} do not sum to feature dimension {}",
                self.stage_dims,
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn stage_dims(&self) -> &[usize] {
        &self.stage_dims
    }

    pub fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    pub fn normalization(&self) -> Option<NormalizationMode> {
        self.normalization
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// Per-class sample counts, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// New bank holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let features = self.features.select_rows(rows.iter());
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self {
            features,
            labels,
            ..self.clone()
        }
    }

    /// Row-wise concatenation of banks sharing dimension, classes and
    /// normalization state. Metadata other than the client id comes from the
    /// first bank.
    pub fn stack(client_id: impl Into<String>, banks: &[FeatureBank]) -> Result<Self> {
        let first = banks
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of banks"))?;
        for b in &banks[1..] {
            if b.dim() != first.dim() || b.num_classes != first.num_classes {
                return Err(Error::incompatible(format!(
                    "bank {} is {}-dim/{} classes, bank {} is {}-dim/{} classes",
                    first.client_id,
                    first.dim(),
                    first.num_classes,
                    b.client_id,
                    b.dim(),
                    b.num_classes
                )));
            }
            if b.normalization != first.normalization {
                return Err(Error::incompatible("banks differ in normalization state"));
            }
        }
        let n: usize = banks.iter().map(FeatureBank::len).sum();
        let d = first.dim();
        let mut features = DMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for b in banks {
            features.rows_mut(row, b.len()).copy_from(&b.features);
            row += b.len();
            labels.extend_from_slice(&b.labels);
        }
        Ok(Self {
            client_id: client_id.into(),
            features,
            labels,
            ..first.clone()
        })
    }
}
