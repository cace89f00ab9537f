use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use feddbl_core::bank::{
    gen_synthetic_federation, read_bank, write_bank, FeatureBank, NormalizationMode, Normalizer, SyntheticSpec,
};
use feddbl_core::fed::{
    client_execute, format_decimal_size, overhead_ratio, personalize, run_feddbl, weight_bytes, BlSettings,
    FailurePolicy,
};
use feddbl_core::harness::{
    evaluate, run_client_scaling, run_sweep, ExperimentConfig, DEFAULT_SCALING_FACTORS,
};
use feddbl_core::metrics::EvalReport;
use feddbl_core::secure::{
    encrypt_update, federate_encrypted, keygen, write_fdbe, FixedPointCodec, PublicKey, DEFAULT_FRAC_BITS,
    DEFAULT_INT_BITS, DEFAULT_KEY_BITS,
};
use feddbl_core::solver::{read_blwt, write_blwt, DEFAULT_LAMBDA};

#[derive(Parser)]
#[command(name = "feddbl", version, about = "One-round federated deep-broad learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic federation as FBNK files.
    Gen(GenArgs),
    /// Solve one client's classifier and write its BLWT upload.
    SolveLocal(SolveLocalArgs),
    /// Run the one-round protocol over client banks.
    Federate(FederateArgs),
    /// Score a weight file on a bank.
    Eval(EvalArgs),
    /// Upload size and comparison against a multi-round baseline.
    Overhead(OverheadArgs),
    /// Fold × proportion sweep. Exit code 2 if some folds failed.
    Sweep(SweepArgs),
    /// Repartition clients into more, smaller clients and compare.
    Scale(ScaleArgs),
    /// Generate a Paillier key pair.
    Keygen(KeygenArgs),
    /// Encrypt a BLWT file into an FDBE update.
    EncryptWeights(EncryptArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value = "l2")]
    mode: NormalizationMode,
    /// Append a constant feature before solving.
    #[arg(long)]
    bias: bool,
}

impl ModelArgs {
    fn settings(&self) -> BlSettings {
        BlSettings {
            lambda: self.lambda,
            normalization: self.mode,
            bias: self.bias,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Samples per client.
    #[arg(long, value_delimiter = ',', default_value = "1000,800,600,400")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.0)]
    client_shift: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SolveLocalArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct FederateArgs {
    /// Client bank; repeat once per client.
    #[arg(long = "bank", required = true)]
    banks: Vec<PathBuf>,
    /// Global weights output.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Drop clients whose solve fails instead of aborting.
    #[arg(long)]
    skip_failed: bool,
    /// Blend weight of each client's local model; writes one file per client.
    #[arg(long)]
    personalize: Option<f64>,
    #[arg(long, requires = "personalize")]
    personalized_dir: Option<PathBuf>,
    /// Aggregate under Paillier encryption.
    #[arg(long)]
    encrypted: bool,
    #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
    key_bits: u64,
    #[arg(long, default_value_t = DEFAULT_FRAC_BITS)]
    frac_bits: u32,
    /// Seed for key generation and encryption randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Multi-round baseline model size in bytes, for the ratio.
    #[arg(long, requires = "baseline_rounds")]
    baseline_bytes: Option<u64>,
    #[arg(long)]
    baseline_rounds: Option<u64>,
    /// Also write the overhead report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Bank to fit z-score statistics on when the test bank is raw.
    #[arg(long)]
    fit_bank: Option<PathBuf>,
    /// Also report micro F1.
    #[arg(long)]
    micro: bool,
}

#[derive(Args)]
struct OverheadArgs {
    #[arg(long, required_unless_present = "weights")]
    d: Option<u64>,
    #[arg(long, required_unless_present = "weights")]
    classes: Option<u64>,
    /// Take d and C from a weight file instead.
    #[arg(long, conflicts_with_all = ["d", "classes"])]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    elem_bytes: u64,
    #[arg(long, default_value_t = 0)]
    header_bytes: u64,
    #[arg(long, requires = "baseline_rounds")]
    baseline_bytes: Option<u64>,
    #[arg(long)]
    baseline_rounds: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, conflicts_with = "banks")]
    config: Option<PathBuf>,
    #[arg(long = "bank")]
    banks: Vec<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    proportions: Option<Vec<f64>>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl SweepArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None if !self.banks.is_empty() => ExperimentConfig::with_banks(self.banks.clone()),
            None => bail!("give --config or at least one --bank"),
        };
        if let Some(f) = self.folds {
            cfg.folds = f;
            cfg.seeds.clear();
        }
        if let Some(p) = &self.proportions {
            cfg.proportions = p.clone();
        }
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        if self.csv.is_some() {
            cfg.csv = self.csv.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ScaleArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SCALING_FACTORS)]
    factors: Vec<usize>,
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
    bits: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    public: PathBuf,
    #[arg(long)]
    secret: PathBuf,
}

#[derive(Args)]
struct EncryptArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    public: PathBuf,
    /// The client's sample count.
    #[arg(long)]
    n_k: u64,
    #[arg(long)]
    client_id: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FRAC_BITS)]
    frac_bits: u32,
    #[arg(long, default_value_t = DEFAULT_INT_BITS)]
    int_bits: u32,
    /// Largest total sample count the aggregate may reach.
    #[arg(long, default_value_t = 1 << 16)]
    n_max: u64,
    #[arg(long)]
    seed: Option<u64>,
}

fn rng(seed: Option<u64>) -> ChaCha8Rng {
    match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_os_rng(),
    }
}

// A closed pipe (`| head`) is not an error worth reporting.
fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn load_banks(paths: &[PathBuf]) -> Result<Vec<FeatureBank>> {
    paths
        .iter()
        .map(|p| read_bank(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.seed, a.dim, a.classes, a.sizes.clone(), a.separation);
    spec.client_shift = a.client_shift;
    let fed = gen_synthetic_federation(&spec)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut written = Vec::new();
    for b in fed.clients.iter().chain([&fed.test]) {
        let name = if b.client_id() == fed.test.client_id() {
            "test.fbnk".to_owned()
        } else {
            format!("{}.fbnk", b.client_id())
        };
        let path = a.out_dir.join(name);
        write_bank(b, &path)?;
        written.push(serde_json::json!({"path": path, "client_id": b.client_id(), "n": b.len()}));
    }
    print_json(&written)
}

fn solve_local(a: &SolveLocalArgs) -> Result<()> {
    let bank = read_bank(&a.bank)?;
    let r = client_execute(&bank, &a.model.settings())?;
    if let Some(w) = &r.warning {
        log::warn!("{w}");
    }
    write_blwt(r.update.weights(), &a.out)?;
    print_json(&serde_json::json!({
        "client_id": r.update.client_id(),
        "n_k": r.update.n_k(),
        "d": r.update.weights().dim(),
        "C": r.update.weights().num_classes(),
        "lambda": r.update.weights().lambda(),
        "upload_bytes": r.update.upload_bytes(),
        "warning": r.warning,
    }))
}

fn federate(a: &FederateArgs) -> Result<()> {
    let banks = load_banks(&a.banks)?;
    let policy = if a.skip_failed {
        FailurePolicy::SkipFailed
    } else {
        FailurePolicy::Abort
    };
    let run = run_feddbl(&banks, &a.model.settings(), policy)?;
    let mut report = run.report.clone();
    let mut global = run.global.weights.clone();

    if a.encrypted {
        let mut r = rng(a.seed);
        let keys = keygen(a.key_bits, &mut r)?;
        let updates: Vec<_> = run.updates().cloned().collect();
        let round = federate_encrypted(&updates, &keys, a.frac_bits, &mut r)?;
        let diff = (round.weights.values() - global.values()).abs().max();
        log::info!("encrypted aggregate differs from plaintext by at most {diff:e}");
        report.encrypted_upload_bytes_per_client = round.upload_bytes.values().copied().max();
        global = round.weights;
    }
    if let (Some(bytes), Some(rounds)) = (a.baseline_bytes, a.baseline_rounds) {
        report = report.with_baseline(bytes, rounds)?;
    }
    write_blwt(&global, &a.out)?;

    if let Some(mix) = a.personalize {
        let dir = a.personalized_dir.clone().unwrap_or_else(|| {
            a.out.parent().map(Path::to_path_buf).unwrap_or_default()
        });
        fs::create_dir_all(&dir)?;
        for c in &run.clients {
            let w = personalize(c.update.weights(), &global, mix)?;
            write_blwt(&w, dir.join(format!("{}.personalized.blwt", c.update.client_id())))?;
        }
    }
    for (id, err) in &run.skipped {
        log::warn!("skipped {id}: {err}");
    }
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    print_json(&report)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let w = read_blwt(&a.weights)?;
    let bank = read_bank(&a.bank)?;
    let bank = if bank.is_normalized() {
        bank
    } else {
        let z = match (&a.fit_bank, w.normalization_mode()) {
            (Some(p), mode) => Normalizer::fit(&read_bank(p)?, mode),
            (None, NormalizationMode::ZScore) => bail!("z-score weights on a raw bank need --fit-bank"),
            (None, mode) => Normalizer::fit(&bank, mode),
        };
        z.apply(&bank)?
    };
    let m = evaluate(&w, &bank)?;
    print_json(&EvalReport::from_confusion(&m, a.micro))
}

fn overhead(a: &OverheadArgs) -> Result<()> {
    let (d, c) = match &a.weights {
        Some(p) => {
            let w = read_blwt(p)?;
            (w.dim() as u64, w.num_classes() as u64)
        }
        None => (a.d.unwrap_or_default(), a.classes.unwrap_or_default()),
    };
    let bytes = weight_bytes(d, c, a.elem_bytes, a.header_bytes)?;
    let mut out = serde_json::json!({
        "d": d,
        "C": c,
        "weight_bytes": bytes,
        "human": format_decimal_size(bytes),
        "rounds": 1,
    });
    if let (Some(b), Some(r)) = (a.baseline_bytes, a.baseline_rounds) {
        let total = b.checked_mul(r).context("baseline bytes × rounds overflows u64")?;
        out["baseline_total_bytes"] = total.into();
        out["baseline_human"] = format_decimal_size(total).into();
        out["ratio"] = overhead_ratio(b, r, bytes)?.into();
    }
    print_json(&out)
}

fn sweep(a: &SweepArgs) -> Result<ExitCode> {
    let cfg = a.config()?;
    let report = run_sweep(&cfg)?;
    report.write_outputs()?;
    if cfg.output.is_none() {
        print!("{}", report.to_json()?);
    }
    for f in report.folds.iter().filter(|f| !f.complete) {
        if let Some(e) = &f.error {
            eprintln!("fold {} (seed {}) failed at {}: {}", f.fold, f.seed, e.stage, e.message);
        }
    }
    Ok(ExitCode::from(report.status.exit_code() as u8))
}

fn scale(a: &ScaleArgs) -> Result<ExitCode> {
    let mut cfg = a.sweep.config()?;
    // proportions do not apply; every factor uses all training data
    cfg.proportions = vec![1.0];
    let report = run_client_scaling(&cfg, &a.factors)?;
    let json = report.to_json()?;
    match &cfg.output {
        Some(p) => fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(ExitCode::from(report.status.exit_code() as u8))
}

fn keygen_cmd(a: &KeygenArgs) -> Result<()> {
    let kp = keygen(a.bits, &mut rng(a.seed))?;
    fs::write(&a.public, serde_json::to_string_pretty(&kp.public)? + "\n")?;
    fs::write(&a.secret, serde_json::to_string_pretty(&kp.secret)? + "\n")?;
    print_json(&serde_json::json!({
        "bits": kp.public.bits(),
        "fingerprint": kp.public.id().to_hex(),
    }))
}

fn encrypt_weights(a: &EncryptArgs) -> Result<()> {
    let w = read_blwt(&a.weights)?;
    let pk: PublicKey = serde_json::from_str(&fs::read_to_string(&a.public)?)?;
    let codec = FixedPointCodec::for_population(a.frac_bits, a.int_bits, a.n_max)?;
    let update = feddbl_core::fed::ClientUpdate::new(a.client_id.clone(), a.n_k, w)?;
    let enc = encrypt_update(&pk, &update, &codec, &mut rng(a.seed))?;
    write_fdbe(&enc, &a.out)?;
    print_json(&serde_json::json!({
        "client_id": enc.client_id,
        "blocks": enc.ciphertexts.len(),
        "slots_per_block": enc.layout.slots_per_block,
        "slot_bits": codec.slot_bits(),
        "bytes": fs::metadata(&a.out)?.len(),
        "key_fingerprint": enc.key.to_hex(),
    }))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gen(a) => gen(a)?,
        Command::SolveLocal(a) => solve_local(a)?,
        Command::Federate(a) => federate(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Overhead(a) => overhead(a)?,
        Command::Sweep(a) => return sweep(a),
        Command::Scale(a) => return scale(a),
        Command::Keygen(a) => keygen_cmd(a)?,
        Command::EncryptWeights(a) => encrypt_weights(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
