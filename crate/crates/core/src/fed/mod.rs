//! Server/client orchestration of the one-round protocol.
//!
//! Every client normalizes its bank, solves its classifier locally and
//! uploads the weights exactly once. The server forms the sample-weighted
//! average `W = Σ_k (n_k / N) · W_k`.

mod overhead;

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bank::{FeatureBank, NormalizationMode, Normalizer};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::solver::{blwt_len, fit_bank, BlWeights, DEFAULT_LAMBDA};

pub use overhead::{format_decimal_size, overhead_ratio, weight_bytes, OverheadReport, OVERHEAD_SCHEMA};

/// Rounds of communication in this protocol.
pub const ROUNDS: u64 = 1;

/// The model configuration the server broadcasts before the round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlSettings {
    pub lambda: f64,
    pub normalization: NormalizationMode,
    /// Append a constant-1 feature before solving.
    #[serde(default)]
    pub bias: bool,
}

impl Default for BlSettings {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            normalization: NormalizationMode::default(),
            bias: false,
        }
    }
}

/// What to do when a client's local solve fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Drop failed clients and aggregate over the rest (N shrinks).
    SkipFailed,
}

/// A client's single upload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    client_id: String,
    n_k: u64,
    weights: BlWeights,
    upload_bytes: u64,
}

impl ClientUpdate {
    pub fn new(client_id: impl Into<String>, n_k: u64, weights: BlWeights) -> Result<Self> {
        if n_k == 0 {
            return Err(Error::invalid("a client update needs at least one sample"));
        }
        let upload_bytes = blwt_len(&weights)? as u64;
        Ok(Self {
            client_id: client_id.into(),
            n_k,
            weights,
            upload_bytes,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn n_k(&self) -> u64 {
        self.n_k
    }

    pub fn weights(&self) -> &BlWeights {
        &self.weights
    }

    pub fn upload_bytes(&self) -> u64 {
        self.upload_bytes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub weights: BlWeights,
    pub total_n: u64,
    /// `(client_id, n_k)` in reduction order (sorted by id).
    pub contributors: Vec<(String, u64)>,
    pub round: u64,
}

/// Sample-weighted average of client weights.
///
/// Terms are reduced in sorted `client_id` order with compensated summation,
/// so the result does not depend on the order of `updates`. Each entry is
/// clamped to the range spanned by the inputs, which the exact convex
/// combination always lies in.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<GlobalModel> {
    let refs: Vec<&ClientUpdate> = updates.iter().collect();
    aggregate_refs(refs)
}

fn aggregate_refs(mut updates: Vec<&ClientUpdate>) -> Result<GlobalModel> {
    let first = *updates
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty set of updates"))?;
    updates.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let mut seen = HashSet::new();
    for u in &updates {
        if !seen.insert(u.client_id.as_str()) {
            return Err(Error::invalid(format!("duplicate client id {}", u.client_id)));
        }
        first.weights.check_compatible(&u.weights)?;
    }

    let total_n: u64 = updates.iter().map(|u| u.n_k).sum();
    let n = total_n as f64;
    let coeffs: Vec<f64> = updates.iter().map(|u| u.n_k as f64 / n).collect();
    let (d, c) = first.weights.values().shape();

    let mut out = DMatrix::zeros(d, c);
    for j in 0..c {
        for i in 0..d {
            let mut acc = CompensatedSum::default();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (u, &a) in updates.iter().zip(&coeffs) {
                let w = u.weights.values()[(i, j)];
                acc.add(a * w);
                lo = lo.min(w);
                hi = hi.max(w);
            }
            out[(i, j)] = acc.value().clamp(lo, hi);
        }
    }

    Ok(GlobalModel {
        weights: first.weights.with_values(out)?,
        total_n,
        contributors: updates.iter().map(|u| (u.client_id.clone(), u.n_k)).collect(),
        round: ROUNDS,
    })
}

/// `mix · local + (1 − mix) · global`, evaluated as
/// `global + mix · (local − global)`. Both endpoints return their input
/// unchanged.
pub fn personalize(local: &BlWeights, global: &BlWeights, mix: f64) -> Result<BlWeights> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid(format!("personalization mix {mix} outside [0, 1]")));
    }
    local.check_compatible(global)?;
    if mix == 1.0 {
        return Ok(local.clone());
    }
    if mix == 0.0 {
        return Ok(global.clone());
    }
    let g = global.values();
    let blended = g + (local.values() - g) * mix;
    global.with_values(blended)
}

/// Client-side result: the upload plus state that never leaves the client.
#[derive(Debug, Clone)]
pub struct ClientResult {
    pub update: ClientUpdate,
    /// Fitted transform for the client's held-out data; `None` if the bank
    /// arrived already normalized.
    pub normalizer: Option<Normalizer>,
    pub warning: Option<String>,
}

/// Normalize, one-hot, solve: the local half of the protocol.
pub fn client_execute(bank: &FeatureBank, settings: &BlSettings) -> Result<ClientResult> {
    let (normalized, normalizer) = match bank.normalization() {
        None => {
            let z = Normalizer::fit(bank, settings.normalization);
            (z.apply(bank)?, Some(z))
        }
        Some(mode) if mode == settings.normalization => (bank.clone(), None),
        Some(mode) => {
            return Err(Error::incompatible(format!(
                "bank normalized with {mode}, federation uses {}",
                settings.normalization
            )))
        }
    };
    let (weights, sol) = fit_bank(&normalized, settings.lambda, settings.bias)?;
    let update = ClientUpdate::new(bank.client_id(), bank.len() as u64, weights)?;
    Ok(ClientResult {
        update,
        normalizer,
        warning: sol.warning,
    })
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    pub global: GlobalModel,
    /// Successful clients, in input order.
    pub clients: Vec<ClientResult>,
    pub report: OverheadReport,
    /// `(client_id, error)` for clients dropped under [`FailurePolicy::SkipFailed`].
    pub skipped: Vec<(String, String)>,
}

impl FederationRun {
    pub fn updates(&self) -> impl Iterator<Item = &ClientUpdate> {
        self.clients.iter().map(|c| &c.update)
    }
}

/// Runs the full one-round protocol over the given client banks.
pub fn run_feddbl(banks: &[FeatureBank], settings: &BlSettings, policy: FailurePolicy) -> Result<FederationRun> {
    let first = banks
        .first()
        .ok_or_else(|| Error::invalid("a federation needs at least one client"))?;
    for b in banks {
        if b.dim() != first.dim() || b.num_classes() != first.num_classes() {
            return Err(Error::incompatible(format!(
                "client {} has d={} C={}, client {} has d={} C={}",
                first.client_id(),
                first.dim(),
                first.num_classes(),
                b.client_id(),
                b.dim(),
                b.num_classes()
            )));
        }
    }

    let mut clients = Vec::with_capacity(banks.len());
    let mut skipped = Vec::new();
    for bank in banks {
        match client_execute(bank, settings) {
            Ok(r) => clients.push(r),
            Err(e) => {
                let e = e.for_client(bank.client_id());
                match policy {
                    FailurePolicy::Abort => return Err(e),
                    FailurePolicy::SkipFailed => {
                        log::warn!("{e}");
                        skipped.push((bank.client_id().to_owned(), e.to_string()));
                    }
                }
            }
        }
    }
    if clients.is_empty() {
        return Err(Error::invalid("every client failed; nothing to aggregate"));
    }

    let global = aggregate_refs(clients.iter().map(|c| &c.update).collect())?;
    let per_client: BTreeMap<String, u64> = clients
        .iter()
        .map(|c| (c.update.client_id.clone(), c.update.upload_bytes))
        .collect();
    let w = &global.weights;
    let payload = weight_bytes(w.dim() as u64, w.num_classes() as u64, 8, 0)?;
    let report = OverheadReport::new(per_client, ROUNDS, payload);
    Ok(FederationRun {
        global,
        clients,
        report,
        skipped,
    })
}
