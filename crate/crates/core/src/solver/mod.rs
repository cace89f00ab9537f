//! Closed-form broad-learning classifier.
//!
//! Training minimizes `‖B W − Y‖² + λ‖W‖²` over the weight matrix `W`
//! (`d × C`) given a normalized feature bank `B` (`n × d`) and one-hot
//! targets `Y`. The minimizer has two equivalent closed forms:
//!
//! * primal: `W = (BᵀB + λI_d)⁻¹ BᵀY`, a `d × d` system;
//! * dual (Gram): `W = Bᵀ(BBᵀ + λI_n)⁻¹ Y`, an `n × n` system.
//!
//! [`solve_ridge`] picks whichever system is smaller and factors it with a
//! Cholesky decomposition; no inverse is ever formed.

mod cholesky;
mod format;

use log::warn;
use nalgebra::DMatrix;

use crate::bank::{FeatureBank, NormalizationMode};
use crate::error::{Error, Result};

pub use format::{blwt_len, decode_blwt, encode_blwt, read_blwt, write_blwt, BLWT_MAGIC, BLWT_VERSION};

pub const DEFAULT_LAMBDA: f64 = 1e-6;
/// Smallest regularizer ever used; positive requests below it are raised.
pub const LAMBDA_FLOOR: f64 = 1e-12;
/// Factor applied to λ for the single retry after a failed factorization.
pub const RETRY_LAMBDA_FACTOR: f64 = 1e3;

/// The trained classifier: the only object a client ever uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct BlWeights {
    values: DMatrix<f64>,
    lambda: f64,
    normalization_mode: NormalizationMode,
    bias: bool,
}

impl BlWeights {
    pub fn new(values: DMatrix<f64>, lambda: f64, normalization_mode: NormalizationMode) -> Result<Self> {
        Self::with_bias(values, lambda, normalization_mode, false)
    }

    /// `bias` marks that the last weight row multiplies an appended
    /// constant-1 feature.
    pub fn with_bias(
        values: DMatrix<f64>,
        lambda: f64,
        normalization_mode: NormalizationMode,
        bias: bool,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("weight matrix must be non-empty"));
        }
        if bias && values.nrows() < 2 {
            return Err(Error::invalid("a bias row needs at least one feature row"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite weight at flat index {i}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda {lambda} must be finite and >= 0")));
        }
        Ok(Self {
            values,
            lambda,
            normalization_mode,
            bias,
        })
    }

    /// Rows of `W`, including the bias row when present.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Width of the feature vectors this model consumes.
    pub fn feature_dim(&self) -> usize {
        self.dim() - usize::from(self.bias)
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn normalization_mode(&self) -> NormalizationMode {
        self.normalization_mode
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    /// Same model metadata, different weight values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::incompatible(format!(
                "shape {:?} does not match {:?}",
                values.shape(),
                self.values.shape()
            )));
        }
        Self::with_bias(values, self.lambda, self.normalization_mode, self.bias)
    }

    /// Whether two models can be averaged or mixed entrywise.
    pub fn check_compatible(&self, other: &BlWeights) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::incompatible(format!(
                "weight shapes {:?} and {:?} differ",
                self.values.shape(),
                other.values.shape()
            )));
        }
        if self.normalization_mode != other.normalization_mode {
            return Err(Error::incompatible(format!(
                "normalization modes {} and {} differ",
                self.normalization_mode, other.normalization_mode
            )));
        }
        if self.bias != other.bias {
            return Err(Error::incompatible("one model has a bias row and the other does not"));
        }
        Ok(())
    }
}

/// One-hot target matrix: exactly one 1.0 per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(DMatrix<f64>);

impl LabelMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }
}

pub fn one_hot(labels: &[u32], classes: usize) -> Result<LabelMatrix> {
    let mut y = DMatrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::invalid(format!(
                "label {l} at row {i} is outside [0, {classes})"
            )));
        }
        y[(i, l as usize)] = 1.0;
    }
    Ok(LabelMatrix(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveForm {
    /// `(BᵀB + λI)⁻¹BᵀY`
    Primal,
    /// `Bᵀ(BBᵀ + λI)⁻¹Y`
    Dual,
}

impl SolveForm {
    /// The form with the smaller linear system for an `n × d` design matrix.
    pub fn for_shape(n: usize, d: usize) -> Self {
        if n >= d {
            SolveForm::Primal
        } else {
            SolveForm::Dual
        }
    }
}

#[derive(Debug, Clone)]
pub struct RidgeSolution {
    pub weights: DMatrix<f64>,
    pub form: SolveForm,
    /// The regularizer actually used, after flooring and any retry.
    pub lambda: f64,
    pub warning: Option<String>,
}

pub fn solve_ridge(features: &DMatrix<f64>, targets: &LabelMatrix, lambda: f64) -> Result<RidgeSolution> {
    let form = SolveForm::for_shape(features.nrows(), features.ncols());
    solve_ridge_with(features, targets, lambda, form)
}

pub fn solve_ridge_with(
    features: &DMatrix<f64>,
    targets: &LabelMatrix,
    lambda: f64,
    form: SolveForm,
) -> Result<RidgeSolution> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and > 0, got {lambda}")));
    }
    if features.nrows() != targets.nrows() {
        return Err(Error::invalid(format!(
            "{} feature rows but {} target rows",
            features.nrows(),
            targets.nrows()
        )));
    }
    if features.ncols() == 0 || targets.ncols() == 0 {
        return Err(Error::invalid("empty feature or class dimension"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("feature matrix contains non-finite values"));
    }

    let mut warning = None;
    let mut lambda_used = lambda;
    if lambda < LAMBDA_FLOOR {
        lambda_used = LAMBDA_FLOOR;
        warning = Some(format!("lambda {lambda:e} raised to floor {LAMBDA_FLOOR:e}"));
    }

    let gram = match form {
        SolveForm::Primal => features.tr_mul(features),
        SolveForm::Dual => features * features.transpose(),
    };
    let rhs = match form {
        SolveForm::Primal => features.tr_mul(targets.as_matrix()),
        SolveForm::Dual => targets.as_matrix().clone(),
    };

    let mut solved = try_solve(&gram, &rhs, lambda_used);
    if solved.is_none() {
        let retry = lambda_used * RETRY_LAMBDA_FACTOR;
        let msg = format!("factorization failed at lambda {lambda_used:e}; retried with {retry:e}");
        warn!("{msg}");
        warning = Some(match warning {
            Some(w) => format!("{w}; {msg}"),
            None => msg,
        });
        lambda_used = retry;
        solved = try_solve(&gram, &rhs, lambda_used);
    }
    let solved = solved.ok_or_else(|| {
        Error::Solve(format!(
            "regularized Gram matrix is not positive definite even at lambda {lambda_used:e}"
        ))
    })?;

    let weights = match form {
        SolveForm::Primal => solved,
        SolveForm::Dual => features.tr_mul(&solved),
    };
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solve("solution contains non-finite weights".into()));
    }
    Ok(RidgeSolution {
        weights,
        form,
        lambda: lambda_used,
        warning,
    })
}

fn try_solve(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Option<DMatrix<f64>> {
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let l = cholesky::factor(&a)?;
    let mut x = rhs.clone();
    cholesky::solve_in_place(&l, &mut x);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Design matrix for a bank, with a trailing constant-1 column if `bias`.
pub fn design_matrix(features: &DMatrix<f64>, bias: bool) -> DMatrix<f64> {
    if bias {
        features.clone().insert_column(features.ncols(), 1.0)
    } else {
        features.clone()
    }
}

/// Client-side training on an already normalized bank.
pub fn fit_bank(bank: &FeatureBank, lambda: f64, bias: bool) -> Result<(BlWeights, RidgeSolution)> {
    let mode = bank.normalization().ok_or_else(|| {
        Error::InvalidState(format!("bank {} must be normalized before solving", bank.client_id()))
    })?;
    let design = design_matrix(bank.features(), bias);
    let targets = one_hot(bank.labels(), bank.num_classes())?;
    let sol = solve_ridge(&design, &targets, lambda)?;
    let weights = BlWeights::with_bias(sol.weights.clone(), sol.lambda, mode, bias)?;
    Ok((weights, sol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: DMatrix<f64>,
    pub labels: Vec<u32>,
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax<'a>(row: impl IntoIterator<Item = &'a f64>) -> u32 {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &v) in row.into_iter().enumerate() {
        if v > best_val {
            best = j;
            best_val = v;
        }
    }
    best as u32
}

pub fn predict(features: &DMatrix<f64>, weights: &BlWeights) -> Result<Prediction> {
    if features.ncols() != weights.feature_dim() {
        return Err(Error::invalid(format!(
            "test features have {} columns, model expects {}",
            features.ncols(),
            weights.feature_dim()
        )));
    }
    let scores = design_matrix(features, weights.has_bias()) * weights.values();
    let labels = scores.row_iter().map(|r| argmax(r.iter())).collect();
    Ok(Prediction { scores, labels })
}
