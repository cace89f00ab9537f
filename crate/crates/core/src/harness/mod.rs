//! Experiment protocol: repeated stratified 7:3 splits per client, sweeps
//! over the proportion of training data used, and client-count scaling.
//!
//! Every random choice draws from a seed derived from the fold seed and the
//! cell coordinates, so a report is a pure function of its config.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bank::{partition_stratified, split_train_test, subsample, FeatureBank, Normalizer};
use crate::error::{Error, Result};
use crate::fed::{personalize, run_feddbl, FederationRun};
use crate::metrics::{accuracy, confusion, fixed6, macro_f1, mcc, ConfusionMatrix};
use crate::secure::{federate_encrypted, keygen, KeyPair};
use crate::solver::{predict, BlWeights};

pub use config::{ExperimentConfig, DEFAULT_FOLDS, DEFAULT_PROPORTIONS, DEFAULT_SCALING_FACTORS};

pub const SWEEP_SCHEMA: &str = "feddbl.sweep/1";
pub const SCALING_SCHEMA: &str = "feddbl.scaling/1";
pub const TRAIN_RATIO: f64 = 0.7;

pub const VARIANT_GLOBAL: &str = "global";
pub const VARIANT_GLOBAL_PER_CLIENT: &str = "global_per_client";
pub const VARIANT_LOCAL: &str = "local";
pub const VARIANT_PERSONALIZED: &str = "personalized";

const TAG_SPLIT: u64 = 1;
const TAG_SUBSAMPLE: u64 = 2;
const TAG_ENCRYPT: u64 = 3;
const TAG_KEY: u64 = 4;
const TAG_PARTITION: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one task, mixed from a base seed and task coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Confusion matrix of `weights` on a normalized bank.
pub fn evaluate(weights: &BlWeights, bank: &FeatureBank) -> Result<ConfusionMatrix> {
    if bank.normalization() != Some(weights.normalization_mode()) {
        return Err(Error::InvalidState(format!(
            "test bank {} is not {}-normalized",
            bank.client_id(),
            weights.normalization_mode()
        )));
    }
    let pred = predict(bank.features(), weights)?;
    confusion(bank.labels(), &pred.labels, bank.num_classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    #[serde(serialize_with = "fixed6")]
    pub accuracy: f64,
    #[serde(serialize_with = "fixed6")]
    pub macro_f1: f64,
    #[serde(serialize_with = "fixed6")]
    pub mcc: f64,
}

impl Scores {
    pub fn of(m: &ConfusionMatrix) -> Self {
        Self {
            accuracy: accuracy(m),
            macro_f1: macro_f1(m),
            mcc: mcc(m),
        }
    }

    fn mean(xs: &[Scores]) -> Self {
        let n = xs.len().max(1) as f64;
        Self {
            accuracy: xs.iter().map(|s| s.accuracy).sum::<f64>() / n,
            macro_f1: xs.iter().map(|s| s.macro_f1).sum::<f64>() / n,
            mcc: xs.iter().map(|s| s.mcc).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    #[serde(serialize_with = "fixed6")]
    pub mean: f64,
    #[serde(serialize_with = "fixed6")]
    pub min: f64,
    #[serde(serialize_with = "fixed6")]
    pub max: f64,
}

impl Stat {
    fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        Self {
            mean: xs.iter().sum::<f64>() / xs.len().max(1) as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
    Failed,
}

impl RunStatus {
    fn from_folds(done: usize, total: usize) -> Self {
        match done {
            0 => RunStatus::Failed,
            d if d == total => RunStatus::Complete,
            _ => RunStatus::Partial,
        }
    }

    /// Process exit code: 0 complete, 2 partial, 1 nothing usable.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Complete => 0,
            RunStatus::Partial => 2,
            RunStatus::Failed => 1,
        }
    }
}

/// Where and why a fold stopped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldError {
    pub stage: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportion: Option<f64>,
    pub message: String,
}

fn at(stage: &'static str, proportion: Option<f64>) -> impl Fn(Error) -> FoldError {
    move |e| FoldError {
        stage,
        proportion,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub proportion: f64,
    pub train_samples: usize,
    pub used_samples: usize,
    pub clients: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub skipped_clients: Vec<String>,
    pub rounds: u64,
    pub upload_bytes_per_client: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encrypted_upload_bytes_per_client: Option<u64>,
    /// Largest entrywise gap between decrypted and plaintext global weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encrypted_max_abs_diff: Option<f64>,
    pub variants: BTreeMap<String, Scores>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<FoldError>,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub proportion: f64,
    pub variant: String,
    /// Completed folds contributing to the statistics.
    pub folds: usize,
    pub accuracy: Stat,
    pub macro_f1: Stat,
    pub mcc: Stat,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub schema: &'static str,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub folds: Vec<FoldResult>,
    /// Mean, min and max across completed folds.
    pub summary: Vec<SummaryRow>,
}

impl SweepReport {
    pub fn summary_for(&self, proportion: f64, variant: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.proportion == proportion && r.variant == variant)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Summary flattened to one row per (proportion, variant, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("proportion,variant,metric,folds,mean,min,max\n");
        for r in &self.summary {
            for (name, s) in [("accuracy", r.accuracy), ("macro_f1", r.macro_f1), ("mcc", r.mcc)] {
                out.push_str(&format!(
                    "{},{},{name},{},{:.6},{:.6},{:.6}\n",
                    r.proportion, r.variant, r.folds, s.mean, s.min, s.max
                ));
            }
        }
        out
    }

    /// Writes the JSON and CSV outputs named in the config, if any.
    pub fn write_outputs(&self) -> Result<()> {
        if let Some(p) = &self.config.output {
            fs::write(p, self.to_json()?)?;
        }
        if let Some(p) = &self.config.csv {
            fs::write(p, self.to_csv())?;
        }
        Ok(())
    }
}

struct Split {
    train: Vec<FeatureBank>,
    test: Vec<FeatureBank>,
}

fn split_clients(clients: &[FeatureBank], seed: u64) -> Result<Split> {
    let mut s = Split {
        train: Vec::with_capacity(clients.len()),
        test: Vec::with_capacity(clients.len()),
    };
    for (k, c) in clients.iter().enumerate() {
        let (tr, te) = split_train_test(c, TRAIN_RATIO, derive_seed(seed, &[TAG_SPLIT, k as u64]))
            .map_err(|e| e.for_client(c.client_id()))?;
        s.train.push(tr);
        s.test.push(te);
    }
    Ok(s)
}

fn normalized_test(normalizer: Option<&Normalizer>, test: &FeatureBank) -> Result<FeatureBank> {
    match normalizer {
        Some(z) => z.apply(test),
        None => Ok(test.clone()),
    }
}

/// Scores every model variant on each participating client's test split.
fn evaluate_run(
    run: &FederationRun,
    global: &BlWeights,
    tests: &HashMap<&str, &FeatureBank>,
    mix: Option<f64>,
) -> Result<BTreeMap<String, Scores>> {
    let classes = global.num_classes();
    let mut pooled = ConfusionMatrix::zeros(classes);
    let mut per_client = Vec::new();
    let mut local = Vec::new();
    let mut personalized = Vec::new();
    for c in &run.clients {
        let id = c.update.client_id();
        let test = tests
            .get(id)
            .ok_or_else(|| Error::InvalidState(format!("no test split for client {id}")))?;
        let test = normalized_test(c.normalizer.as_ref(), test)?;
        let g = evaluate(global, &test)?;
        pooled.merge(&g)?;
        per_client.push(Scores::of(&g));
        local.push(Scores::of(&evaluate(c.update.weights(), &test)?));
        if let Some(m) = mix {
            let w = personalize(c.update.weights(), global, m)?;
            personalized.push(Scores::of(&evaluate(&w, &test)?));
        }
    }
    let mut v = BTreeMap::new();
    v.insert(VARIANT_GLOBAL.to_owned(), Scores::of(&pooled));
    v.insert(VARIANT_GLOBAL_PER_CLIENT.to_owned(), Scores::mean(&per_client));
    v.insert(VARIANT_LOCAL.to_owned(), Scores::mean(&local));
    if mix.is_some() {
        v.insert(VARIANT_PERSONALIZED.to_owned(), Scores::mean(&personalized));
    }
    Ok(v)
}

fn run_cell(
    cfg: &ExperimentConfig,
    split: &Split,
    seed: u64,
    pi: usize,
    keys: Option<&KeyPair>,
) -> Result<CellResult, FoldError> {
    let p = cfg.proportions[pi];
    let train: Vec<FeatureBank> = split
        .train
        .iter()
        .enumerate()
        .map(|(k, b)| {
            subsample(b, p, derive_seed(seed, &[TAG_SUBSAMPLE, pi as u64, k as u64]))
                .map_err(|e| e.for_client(b.client_id()))
        })
        .collect::<Result<_>>()
        .map_err(at("subsample", Some(p)))?;
    let run = run_feddbl(&train, &cfg.settings(), cfg.failure_policy).map_err(at("federate", Some(p)))?;

    let mut global = run.global.weights.clone();
    let mut enc_bytes = None;
    let mut enc_diff = None;
    if let Some(keys) = keys {
        let updates: Vec<_> = run.updates().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_ENCRYPT, pi as u64]));
        let round = federate_encrypted(&updates, keys, cfg.frac_bits, &mut rng).map_err(at("encrypt", Some(p)))?;
        enc_diff = Some((round.weights.values() - global.values()).abs().max());
        enc_bytes = round.upload_bytes.values().copied().max();
        global = round.weights;
    }

    let tests: HashMap<&str, &FeatureBank> = split.test.iter().map(|b| (b.client_id(), b)).collect();
    let variants = evaluate_run(&run, &global, &tests, cfg.personalize_mix).map_err(at("evaluate", Some(p)))?;
    Ok(CellResult {
        proportion: p,
        train_samples: split.train.iter().map(FeatureBank::len).sum(),
        used_samples: train.iter().map(FeatureBank::len).sum(),
        clients: run.clients.len(),
        skipped_clients: run.skipped.iter().map(|(id, _)| id.clone()).collect(),
        rounds: run.report.rounds,
        upload_bytes_per_client: run.report.per_round_bytes_per_client,
        encrypted_upload_bytes_per_client: enc_bytes,
        encrypted_max_abs_diff: enc_diff,
        variants,
    })
}

fn run_fold(cfg: &ExperimentConfig, clients: &[FeatureBank], fold: usize, seed: u64, keys: Option<&KeyPair>) -> FoldResult {
    let mut res = FoldResult {
        fold,
        seed,
        complete: false,
        error: None,
        cells: Vec::new(),
    };
    let split = match split_clients(clients, seed) {
        Ok(s) => s,
        Err(e) => {
            res.error = Some(at("split", None)(e));
            return res;
        }
    };
    for pi in 0..cfg.proportions.len() {
        match run_cell(cfg, &split, seed, pi, keys) {
            Ok(c) => res.cells.push(c),
            Err(e) => {
                log::warn!("fold {fold} (seed {seed}) failed at {}: {}", e.stage, e.message);
                res.error = Some(e);
                return res;
            }
        }
    }
    res.complete = true;
    res
}

fn sweep_keys(cfg: &ExperimentConfig) -> Result<Option<KeyPair>> {
    if !cfg.encrypted {
        return Ok(None);
    }
    let seed = derive_seed(cfg.fold_seeds()[0], &[TAG_KEY]);
    keygen(cfg.key_bits, &mut ChaCha8Rng::seed_from_u64(seed)).map(Some)
}

/// Runs every fold and proportion. Stage failures inside a fold are
/// recorded in the report; only config and loading errors are returned.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let clients = cfg.load_clients()?;
    let keys = sweep_keys(cfg)?;
    let folds: Vec<FoldResult> = cfg
        .fold_seeds()
        .into_iter()
        .enumerate()
        .map(|(i, seed)| run_fold(cfg, &clients, i, seed, keys.as_ref()))
        .collect();

    let complete: Vec<&FoldResult> = folds.iter().filter(|f| f.complete).collect();
    let mut summary = Vec::new();
    for (pi, &p) in cfg.proportions.iter().enumerate() {
        let cells: Vec<&CellResult> = complete.iter().map(|f| &f.cells[pi]).collect();
        let Some(first) = cells.first() else { continue };
        for variant in first.variants.keys() {
            let s: Vec<Scores> = cells.iter().map(|c| c.variants[variant]).collect();
            summary.push(SummaryRow {
                proportion: p,
                variant: variant.clone(),
                folds: s.len(),
                accuracy: Stat::of(s.iter().map(|x| x.accuracy)),
                macro_f1: Stat::of(s.iter().map(|x| x.macro_f1)),
                mcc: Stat::of(s.iter().map(|x| x.mcc)),
            });
        }
    }
    Ok(SweepReport {
        schema: SWEEP_SCHEMA,
        status: RunStatus::from_folds(complete.len(), folds.len()),
        config: cfg.clone(),
        folds,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingCell {
    pub factor: usize,
    pub clients: usize,
    pub train_samples: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingFold {
    pub fold: usize,
    pub seed: u64,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<FoldError>,
    pub cells: Vec<ScalingCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub factor: usize,
    pub clients: usize,
    pub folds: usize,
    pub accuracy: Stat,
    pub macro_f1: Stat,
    pub mcc: Stat,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub schema: &'static str,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub factors: Vec<usize>,
    pub folds: Vec<ScalingFold>,
    pub rows: Vec<ScalingRow>,
    /// Largest minus smallest mean MCC across factors.
    #[serde(serialize_with = "fixed6")]
    pub mcc_spread: f64,
}

impl ScalingReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn scaling_fold(
    cfg: &ExperimentConfig,
    clients: &[FeatureBank],
    factors: &[usize],
    fold: usize,
    seed: u64,
) -> Result<Vec<ScalingCell>, FoldError> {
    let split = split_clients(clients, seed).map_err(at("split", None))?;
    // Each parent's test split is normalized the way the parent would have
    // normalized it before being divided.
    let mut pooled_tests = Vec::with_capacity(split.test.len());
    for (tr, te) in split.train.iter().zip(&split.test) {
        let z = tr
            .normalization()
            .is_none()
            .then(|| Normalizer::fit(tr, cfg.normalization_mode));
        pooled_tests.push(normalized_test(z.as_ref(), te).map_err(at("normalize", None))?);
    }
    let mut cells = Vec::with_capacity(factors.len());
    for &f in factors {
        let mut children = Vec::new();
        for (k, tr) in split.train.iter().enumerate() {
            let parts = partition_stratified(tr, f, derive_seed(seed, &[TAG_PARTITION, k as u64, f as u64]))
                .map_err(|e| e.for_client(tr.client_id()))
                .map_err(at("partition", None))?;
            children.extend(parts);
        }
        let run = run_feddbl(&children, &cfg.settings(), cfg.failure_policy).map_err(at("federate", None))?;
        let mut m = ConfusionMatrix::zeros(run.global.weights.num_classes());
        for t in &pooled_tests {
            m.merge(&evaluate(&run.global.weights, t).map_err(at("evaluate", None))?)
                .map_err(at("evaluate", None))?;
        }
        log::debug!("fold {fold} factor {f}: {} clients", children.len());
        cells.push(ScalingCell {
            factor: f,
            clients: run.clients.len(),
            train_samples: children.iter().map(FeatureBank::len).sum(),
            scores: Scores::of(&m),
        });
    }
    Ok(cells)
}

/// Splits every client's training data into `f` stratified children for
/// each factor `f` and reruns the federation on all data. Test data stays
/// with the parents and is pooled.
pub fn run_client_scaling(cfg: &ExperimentConfig, factors: &[usize]) -> Result<ScalingReport> {
    if factors.is_empty() || factors.contains(&0) {
        return Err(Error::invalid("scaling factors must be non-empty and positive"));
    }
    let clients = cfg.load_clients()?;
    let folds: Vec<ScalingFold> = cfg
        .fold_seeds()
        .into_iter()
        .enumerate()
        .map(|(fold, seed)| match scaling_fold(cfg, &clients, factors, fold, seed) {
            Ok(cells) => ScalingFold {
                fold,
                seed,
                complete: true,
                error: None,
                cells,
            },
            Err(e) => {
                log::warn!("scaling fold {fold} (seed {seed}) failed at {}: {}", e.stage, e.message);
                ScalingFold {
                    fold,
                    seed,
                    complete: false,
                    error: Some(e),
                    cells: Vec::new(),
                }
            }
        })
        .collect();

    let complete: Vec<&ScalingFold> = folds.iter().filter(|f| f.complete).collect();
    let mut rows = Vec::new();
    if !complete.is_empty() {
        for (i, &factor) in factors.iter().enumerate() {
            let s: Vec<Scores> = complete.iter().map(|f| f.cells[i].scores).collect();
            rows.push(ScalingRow {
                factor,
                clients: complete[0].cells[i].clients,
                folds: s.len(),
                accuracy: Stat::of(s.iter().map(|x| x.accuracy)),
                macro_f1: Stat::of(s.iter().map(|x| x.macro_f1)),
                mcc: Stat::of(s.iter().map(|x| x.mcc)),
            });
        }
    }
    let means = rows.iter().map(|r| r.mcc.mean);
    let spread = means.clone().fold(f64::NEG_INFINITY, f64::max) - means.fold(f64::INFINITY, f64::min);
    Ok(ScalingReport {
        schema: SCALING_SCHEMA,
        status: RunStatus::from_folds(complete.len(), folds.len()),
        config: cfg.clone(),
        factors: factors.to_vec(),
        folds,
        rows,
        mcc_spread: if spread.is_finite() { spread } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::SyntheticSpec;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::synthetic(SyntheticSpec::new(3, 8, 3, vec![120, 90], 5.0));
        cfg.proportions = vec![0.1, 1.0];
        cfg.folds = 2;
        cfg
    }

    #[test]
    fn derived_seeds_differ_by_coordinate() {
        let a = derive_seed(1, &[TAG_SPLIT, 0]);
        assert_ne!(a, derive_seed(1, &[TAG_SPLIT, 1]));
        assert_ne!(a, derive_seed(2, &[TAG_SPLIT, 0]));
        assert_ne!(a, derive_seed(1, &[TAG_SUBSAMPLE, 0]));
        assert_eq!(a, derive_seed(1, &[TAG_SPLIT, 0]));
    }

    #[test]
    fn status_and_exit_codes() {
        assert_eq!(RunStatus::from_folds(5, 5).exit_code(), 0);
        assert_eq!(RunStatus::from_folds(3, 5).exit_code(), 2);
        assert_eq!(RunStatus::from_folds(0, 5).exit_code(), 1);
    }

    #[test]
    fn sweep_shape() {
        let r = run_sweep(&small_cfg()).unwrap();
        assert_eq!(r.status, RunStatus::Complete);
        assert_eq!(r.folds.len(), 2);
        assert!(r.folds.iter().all(|f| f.cells.len() == 2));
        assert_eq!(r.summary.len(), 2 * 3);
        let g = r.summary_for(1.0, VARIANT_GLOBAL).unwrap();
        assert!(g.mcc.min <= g.mcc.mean && g.mcc.mean <= g.mcc.max);
        assert!(r.to_csv().lines().count() == 1 + 2 * 3 * 3);
    }

    #[test]
    fn failed_fold_is_recorded() {
        let mut cfg = small_cfg();
        cfg.encrypted = true;
        cfg.key_bits = 128;
        // slots wider than the codec allows: every fold fails at encryption
        cfg.frac_bits = 120;
        let r = run_sweep(&cfg).unwrap();
        assert_eq!(r.status, RunStatus::Failed);
        let e = r.folds[0].error.as_ref().unwrap();
        assert_eq!(e.stage, "encrypt");
        assert_eq!(e.proportion, Some(0.1));
        assert!(r.summary.is_empty());
    }

    #[test]
    fn scaling_preserves_samples() {
        let mut cfg = small_cfg();
        cfg.folds = 1;
        let r = run_client_scaling(&cfg, &[1, 3]).unwrap();
        let cells = &r.folds[0].cells;
        assert_eq!(cells[0].train_samples, cells[1].train_samples);
        assert_eq!(cells[1].clients, 6);
        assert!(run_client_scaling(&cfg, &[]).is_err());
        // 3 classes spread over 120·0.7 rows cannot feed 60 children each
        let bad = run_client_scaling(&cfg, &[60]).unwrap();
        assert_eq!(bad.status, RunStatus::Failed);
        assert_eq!(bad.folds[0].error.as_ref().unwrap().stage, "partition");
    }
}
