//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 numerical abort.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::data::{self, CsvSchema, Dataset, Split, Standardizer};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::Checkpoint;
use crate::trainer::{self, parse_kv, TrainConfig};
use crate::verify::{self, SuiteOptions, VerifyReport, SUITES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "metassl", version, about = "Semi-supervised training with meta-learned pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Train a classifier and write metrics, a checkpoint and a manifest.
    Train(TrainArgs),
    /// Re-run a training manifest and compare the metrics bit for bit.
    Replay(ReplayArgs),
    /// Run numerical verification suites.
    Verify(VerifyArgs),
    /// Report accuracy of a checkpoint on every split of a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Generator {
    TwoMoons,
    Blobs,
}

impl Generator {
    fn tag(self) -> &'static str {
        match self {
            Generator::TwoMoons => "two-moons",
            Generator::Blobs => "blobs",
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Generator,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Gaussian noise for two-moons, within-class standard deviation for blobs.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Number of blobs.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Radius of the circle the blob centres sit on.
    #[arg(long, default_value_t = 3.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Examples moved to the test split (category-balanced).
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Category-balanced labeled examples drawn from the training rows.
    #[arg(long)]
    labels: Option<usize>,
    /// Keep labeled examples in the unlabeled pool as well.
    #[arg(long)]
    include_labeled: bool,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// A number, or `alpha` to follow the α schedule.
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hidden widths, e.g. `16,16`.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Exact algorithm, plain SGD, full labeled batch, enforced step-size condition.
    #[arg(long)]
    theorem_mode: bool,
    #[arg(long)]
    no_meta: bool,
    #[arg(long)]
    no_mixup: bool,
    /// Any config key, applied after the other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to `replay/` next to the manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// One of gradcheck, hypergrad, lemma1, descent, rate-trend or all.
    #[arg(long = "suite", default_value = "all")]
    suites: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    safety: f64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Re-create the labeled split used in training.
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `split,n,correct,accuracy,error_rate` rows here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Replay(a) => cmd_replay(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<i32> {
    let t0 = Instant::now();
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let ds = match a.kind {
        Generator::TwoMoons => data::gen_two_moons(a.n, a.noise, a.seed)?,
        Generator::Blobs => data::gen_blobs(a.n, a.k, a.spread, a.noise, a.seed)?,
    };
    let ds = if a.test > 0 {
        ds.hold_out_test(a.test, a.seed)?
    } else {
        ds
    };
    data::save_csv(&ds, &a.out)?;
    let bytes = fs::read(&a.out)?;
    let mut m = String::new();
    let _ = writeln!(m, "# metassl data manifest");
    let _ = writeln!(m, "command = gen-data");
    let _ = writeln!(m, "kind = {}", a.kind.tag());
    let _ = writeln!(m, "n = {}", a.n);
    let _ = writeln!(m, "noise = {:?}", a.noise);
    if a.kind == Generator::Blobs {
        let _ = writeln!(m, "k = {}", a.k);
        let _ = writeln!(m, "spread = {:?}", a.spread);
    }
    let _ = writeln!(m, "seed = {}", a.seed);
    let _ = writeln!(m, "test = {}", a.test);
    let _ = writeln!(m, "output = {}", a.out.display());
    let _ = writeln!(m, "data_fingerprint = {}", ds.fingerprint());
    let _ = writeln!(m, "file_sha256 = {}", sha256_hex(&bytes));
    let _ = writeln!(m, "wall_clock_secs = {:.3}", t0.elapsed().as_secs_f64());
    let mut mpath = a.out.clone().into_os_string();
    mpath.push(".manifest");
    fs::write(PathBuf::from(mpath), m)?;
    println!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(EXIT_OK)
}

/// How a dataset file is turned into training splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPlan {
    pub path: PathBuf,
    pub labels: usize,
    pub include_labeled: bool,
    pub standardize: bool,
}

pub const DEFAULT_LABELS: usize = 10;

/// Loads the file, assigns labels with `seed` and standardizes on the
/// non-test rows. Returns the raw data fingerprint as well.
pub fn prepare_data(plan: &DataPlan, seed: u64) -> Result<(String, Dataset, Option<Standardizer>)> {
    let raw = data::load_csv(&plan.path, &CsvSchema::default())?;
    let fingerprint = raw.fingerprint();
    let mut ds = data::split_labels(&raw, plan.labels, seed)?.with_labeled_in_unlabeled(plan.include_labeled);
    let st = if plan.standardize {
        let st = Standardizer::fit(&ds)?;
        ds.standardize(&st)?;
        Some(st)
    } else {
        None
    };
    Ok((fingerprint, ds, st))
}

/// Applies one `key = value` setting, covering the data keys as well.
fn apply_setting(cfg: &mut TrainConfig, plan: &mut DataPlan, key: &str, value: &str) -> Result<()> {
    let flag = |v: &str| match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{v}' is not a boolean"))),
    };
    match key {
        "labels" => {
            plan.labels = value
                .parse()
                .map_err(|_| Error::Config(format!("labels: '{value}' is not a count")))?
        }
        "include_labeled" => plan.include_labeled = flag(value)?,
        "standardize" => plan.standardize = flag(value)?,
        _ => {
            if !cfg.set(key, value)? {
                return Err(Error::Config(format!("unknown setting '{key}'")));
            }
        }
    }
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Result<(TrainConfig, DataPlan)> {
    let mut cfg = TrainConfig::default();
    let mut plan = DataPlan {
        path: a.data.clone(),
        labels: DEFAULT_LABELS,
        include_labeled: false,
        standardize: true,
    };
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p)?;
        for (k, v) in parse_kv(&text)? {
            apply_setting(&mut cfg, &mut plan, &k, &v)?;
        }
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut push = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("labels", a.labels.map(|v| v.to_string()));
    push("include_labeled", a.include_labeled.then(|| "true".into()));
    push("standardize", a.no_standardize.then(|| "false".into()));
    push("algorithm", a.algorithm.clone());
    push("steps", a.steps.map(|v| v.to_string()));
    push("alpha", a.alpha.map(|v| format!("{v:?}")));
    push("beta", a.beta.clone());
    push("gamma", a.gamma.map(|v| format!("{v:?}")));
    push("optimizer", a.optimizer.clone());
    push("momentum", a.momentum.map(|v| format!("{v:?}")));
    push("weight_decay", a.weight_decay.map(|v| format!("{v:?}")));
    push("seed", a.seed.map(|v| v.to_string()));
    push("hidden", a.hidden.clone());
    push("activation", a.activation.clone());
    push("batch_labeled", a.batch_labeled.map(|v| v.to_string()));
    push("batch_unlabeled", a.batch_unlabeled.map(|v| v.to_string()));
    push("eval_every", a.eval_every.map(|v| v.to_string()));
    push("theorem_mode", a.theorem_mode.then(|| "true".into()));
    push("meta", a.no_meta.then(|| "false".into()));
    push("mixup", a.no_mixup.then(|| "false".into()));
    for (k, v) in flags {
        apply_setting(&mut cfg, &mut plan, k, &v)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        apply_setting(&mut cfg, &mut plan, k.trim(), v.trim())?;
    }
    if cfg.theorem_mode {
        cfg = cfg.into_theorem_mode();
    }
    cfg.validate()?;
    Ok((cfg, plan))
}

/// What a finished (or aborted) training run left on disk.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest_path: PathBuf,
    pub metrics_sha256: String,
    pub aborted: Option<String>,
}

/// Trains and writes metrics, evaluations, checkpoint and manifest into
/// `out_dir`.
pub fn execute_train(cfg: &TrainConfig, plan: &DataPlan, out_dir: &Path) -> Result<RunSummary> {
    let t0 = Instant::now();
    if !plan.path.is_file() {
        return Err(Error::Config(format!("data file {} not found", plan.path.display())));
    }
    let (fingerprint, ds, st) = prepare_data(plan, cfg.seed)?;
    let outcome = trainer::fit(cfg, &ds)?;
    for e in &outcome.events {
        eprintln!("note: {e}");
    }
    fs::create_dir_all(out_dir)?;
    let mut metrics = Vec::new();
    trainer::write_metrics_csv(&outcome.records, &mut metrics)?;
    fs::write(out_dir.join(METRICS_FILE), &metrics)?;
    let mut evals = Vec::new();
    trainer::write_eval_csv(&outcome.evals, &mut evals)?;
    fs::write(out_dir.join(EVAL_FILE), &evals)?;
    Checkpoint::new(outcome.model.clone(), st).save(&out_dir.join(CHECKPOINT_FILE))?;

    let metrics_sha256 = sha256_hex(&metrics);
    let data_path = fs::canonicalize(&plan.path).unwrap_or_else(|_| plan.path.clone());
    let mut m = String::new();
    let _ = writeln!(m, "# metassl run manifest");
    let _ = writeln!(m, "command = train");
    let _ = writeln!(m, "data = {}", data_path.display());
    let _ = writeln!(m, "data_fingerprint = {fingerprint}");
    let _ = writeln!(m, "labels = {}", plan.labels);
    let _ = writeln!(m, "include_labeled = {}", plan.include_labeled);
    let _ = writeln!(m, "standardize = {}", plan.standardize);
    for line in cfg.to_kv().lines() {
        let _ = writeln!(m, "config.{line}");
    }
    let _ = writeln!(m, "metrics = {METRICS_FILE}");
    let _ = writeln!(m, "eval = {EVAL_FILE}");
    let _ = writeln!(m, "checkpoint = {CHECKPOINT_FILE}");
    let _ = writeln!(m, "metrics_sha256 = {metrics_sha256}");
    if let Some(a) = &outcome.aborted {
        let _ = writeln!(m, "aborted = {}", a.replace('#', " "));
    }
    let _ = writeln!(m, "wall_clock_secs = {:.3}", t0.elapsed().as_secs_f64());
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, m)?;

    for e in &outcome.evals {
        if e.step == outcome.records.len() {
            println!(
                "{} accuracy {:.4} (n = {})",
                e.result.split.name(),
                e.result.accuracy,
                e.result.n
            );
        }
    }
    Ok(RunSummary {
        manifest_path,
        metrics_sha256,
        aborted: outcome.aborted,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let (cfg, plan) = resolve_train(a)?;
    let summary = execute_train(&cfg, &plan, &a.out_dir)?;
    println!("manifest {}", summary.manifest_path.display());
    match summary.aborted {
        Some(msg) => {
            eprintln!("error: numerical abort at {msg}; last finite model saved");
            Ok(EXIT_NUMERICAL)
        }
        None => Ok(EXIT_OK),
    }
}

/// Settings recovered from a run manifest.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub config: TrainConfig,
    pub plan: DataPlan,
    pub data_fingerprint: String,
    pub metrics_sha256: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        let mut plan = DataPlan {
            path: PathBuf::new(),
            labels: DEFAULT_LABELS,
            include_labeled: false,
            standardize: true,
        };
        let mut fingerprint = None;
        let mut sha = None;
        for (k, v) in parse_kv(&text)? {
            if let Some(key) = k.strip_prefix("config.") {
                if !cfg.set(key, &v)? {
                    return Err(Error::Config(format!("manifest: unknown config key '{key}'")));
                }
                continue;
            }
            match k.as_str() {
                "data" => plan.path = PathBuf::from(v),
                "data_fingerprint" => fingerprint = Some(v),
                "metrics_sha256" => sha = Some(v),
                "labels" | "include_labeled" | "standardize" => {
                    apply_setting(&mut cfg, &mut plan, &k, &v)?
                }
                _ => {}
            }
        }
        if cfg.theorem_mode {
            cfg = cfg.into_theorem_mode();
        }
        let missing = |what: &str| Error::Config(format!("manifest has no {what}"));
        if plan.path.as_os_str().is_empty() {
            return Err(missing("data path"));
        }
        Ok(Manifest {
            config: cfg,
            plan,
            data_fingerprint: fingerprint.ok_or_else(|| missing("data_fingerprint"))?,
            metrics_sha256: sha.ok_or_else(|| missing("metrics_sha256"))?,
        })
    }
}

fn cmd_replay(a: &ReplayArgs) -> Result<i32> {
    let man = Manifest::load(&a.manifest)?;
    let raw = data::load_csv(&man.plan.path, &CsvSchema::default())?;
    if raw.fingerprint() != man.data_fingerprint {
        return Err(Error::Config(format!(
            "{} changed since the run (fingerprint mismatch)",
            man.plan.path.display()
        )));
    }
    let out_dir = a.out_dir.clone().unwrap_or_else(|| {
        a.manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("replay")
    });
    let summary = execute_train(&man.config, &man.plan, &out_dir)?;
    if summary.metrics_sha256 == man.metrics_sha256 {
        println!("replay matches: metrics sha256 {}", summary.metrics_sha256);
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "replay differs: expected {}, got {}",
            man.metrics_sha256, summary.metrics_sha256
        );
        Ok(EXIT_VERIFY_FAILED)
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let mut names: Vec<&str> = Vec::new();
    for s in &a.suites {
        for part in s.split(',') {
            let part = part.trim();
            if part == "all" {
                names.extend(SUITES);
            } else if SUITES.contains(&part) {
                names.push(part);
            } else {
                return Err(Error::Config(format!(
                    "unknown suite '{part}' (expected one of {}, all)",
                    SUITES.join(", ")
                )));
            }
        }
    }
    names.dedup();
    if !(a.safety >= 1.0) {
        return Err(Error::Config("--safety must be at least 1".into()));
    }
    let model = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.model),
        None => None,
    };
    let opts = SuiteOptions {
        seed: a.seed,
        steps: a.steps,
        model,
        safety: a.safety,
    };
    let mut report = VerifyReport::new(a.safety);
    for name in names {
        let ok = verify::run_suite(name, &opts, &mut report)?;
        let detail = &report.suites.last().expect("suite recorded").2;
        eprintln!("{name}: {} ({detail})", if ok { "pass" } else { "FAIL" });
    }
    let text = report.to_kv();
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    Ok(if report.all_passed() {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let raw = data::load_csv(&a.data, &CsvSchema::default())?;
    let mut ds = match a.labels {
        Some(n) => data::split_labels(&raw, n, a.seed)?,
        None => raw,
    };
    if let Some(st) = &ck.standardizer {
        ds.standardize(st)?;
    }
    let results = eval::evaluate(&ck.model, &ds)?;
    let mut csv = String::from("split,n,correct,accuracy,error_rate\n");
    for r in &results {
        let name = match (r.split, a.labels) {
            (Split::Unlabeled, None) => "train",
            (s, _) => s.name(),
        };
        println!(
            "{name}: accuracy {:.4}, error rate {:.4} ({}/{})",
            r.accuracy, r.error_rate, r.correct, r.n
        );
        let _ = writeln!(csv, "{name},{},{},{:?},{:?}", r.n, r.correct, r.accuracy, r.error_rate);
    }
    if let Some(p) = &a.out {
        fs::write(p, csv)?;
    }
    Ok(EXIT_OK)
}
