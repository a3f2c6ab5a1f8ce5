//! Command-line driver: `run`, `select`, `verify` and `report`.
//!
//! Exit codes: 0 success, 1 verification failure or other error, 2 invalid
//! configuration, 3 backend failure, 4 selection infeasible.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index;
use serde::Serialize;
use thiserror::Error;

use crate::analytics::{self, AnalyticsError, MuMode};
use crate::config::{BackendConfig, ConfigError, ExperimentConfig};
use crate::engine::{Engine, EngineError, PredictionCache, RunArtifact};
use crate::oracle::{self, OracleError};
use crate::seeding::{self, tag};

#[derive(Debug, Parser)]
#[command(name = "iclmc", version, about = "Monte Carlo evaluation of in-context learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan random exemplar orderings and record per-k accuracy.
    Run(RunArgs),
    /// Score exemplars by Z-score and pick the high and low sets.
    Select(SelectArgs),
    /// Compare the Monte Carlo curve with exact enumeration (mock backends).
    Verify(VerifyArgs),
    /// Write curve and plot tables from a records file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backend, e.g. `mock:hash:3` or `remote:http://host/v1/completions`.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Continue from the checkpoint left by an interrupted run.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Records file; defaults to `records.jsonl` in the output directory.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// How per-exemplar accuracy is averaged: at-addition or in-prefix.
    #[arg(long)]
    pub mode: Option<MuMode>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Records file written by `run`.
    #[arg(long)]
    pub records: PathBuf,
    /// Output directory; defaults to the records file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for symmetry with the other commands; unused.
    #[arg(long, hide = true)]
    pub mode: Option<MuMode>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend failure: {message}")]
    Backend {
        message: String,
        checkpoint: Option<PathBuf>,
    },
    #[error("selection infeasible: {0}")]
    Infeasible(String),
    #[error("verification failed: max |error| {max_abs_error} exceeds tolerance")]
    VerifyFailed { max_abs_error: f64 },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend { .. } => 3,
            CliError::Infeasible(_) => 4,
            CliError::VerifyFailed { .. } | CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn engine_error(e: EngineError, checkpoint: Option<&Path>) -> CliError {
    if e.is_backend() {
        CliError::Backend {
            message: e.to_string(),
            checkpoint: checkpoint.map(Path::to_path_buf),
        }
    } else {
        match e {
            EngineError::Config(_) | EngineError::Corpus(_) | EngineError::Prompt(_) => {
                CliError::Config(e.to_string())
            }
            EngineError::Trial { ref source, .. }
                if matches!(**source, EngineError::Corpus(_) | EngineError::Prompt(_)) =>
            {
                CliError::Config(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

fn analytics_error(e: AnalyticsError) -> CliError {
    match e {
        AnalyticsError::InsufficientCandidates { .. } => CliError::Infeasible(e.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

/// Exclusive ownership of an output directory for one command.
struct DirLock(PathBuf);

impl DirLock {
    const NAME: &'static str = ".iclmc.lock";

    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let path = dir.join(Self::NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Other(format!(
                "{} is locked by another command; remove {} if no other command is running",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_error(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Load the configuration and apply command-line overrides.
fn load_config(o: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(&o.config)?;
    if let Some(out) = &o.out {
        config.out_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
    }
    if let Some(seed) = o.seed {
        config.run.seed = seed;
    }
    if let Some(spec) = &o.backend {
        config.backend = BackendConfig::parse_override(spec, &config.backend)?;
    }
    Ok(config)
}

/// Write the curve and plot tables for `records`.
fn write_tables(records: &RunArtifact, out: &Path) -> Result<analytics::CurveSummary, CliError> {
    let an = |e: AnalyticsError| CliError::Other(format!("records: {e}"));
    let summary = analytics::summarize_curve(&records.records).map_err(an)?;
    write(&out.join("curve.json"), to_json(&summary))?;
    write(&out.join("curve.csv"), analytics::curve_csv(&summary))?;
    write(&out.join("plot_curve.csv"), analytics::plot_curve_csv(&summary))?;
    write(&out.join("plot_traces.csv"), analytics::traces_csv(&records.records).map_err(an)?)?;
    write(&out.join("plot_oneshot.csv"), analytics::oneshot_csv(&records.records).map_err(an)?)?;
    Ok(summary)
}

pub fn cmd_run(args: &RunArgs) -> Result<String, CliError> {
    let config = load_config(&args.common)?;
    let prepared = config.prepare()?;
    let engine = Engine::new(config.run.clone(), &prepared.dataset, &prepared.template, &*prepared.backend)
        .map_err(|e| engine_error(e, None))?;

    let out = &config.out_dir;
    let _lock = DirLock::acquire(out)?;
    let engine = if config.run.cache {
        let path = out.join("cache.jsonl");
        engine.with_cache(PredictionCache::open(&path).map_err(|e| io_error(&path, e))?)
    } else {
        engine
    };
    let checkpoint = out.join("checkpoint.json");
    let artifact = engine
        .run_experiment_resumable(&checkpoint, args.resume)
        .map_err(|e| engine_error(e, Some(&checkpoint)))?;

    let records_path = out.join("records.jsonl");
    artifact.write_jsonl(&records_path).map_err(|e| io_error(&records_path, e))?;
    write(&out.join("provenance.json"), to_json(&artifact.provenance))?;
    let summary = write_tables(&artifact, out)?;
    fs::remove_file(&checkpoint).map_err(|e| io_error(&checkpoint, e))?;

    let mut msg = format!(
        "{} records ({} trials x {} orderings x {} prefix lengths), eval size {}\n",
        artifact.records.len(),
        config.run.trials,
        config.run.permutation_count(),
        config.run.k + 1,
        artifact.provenance.eval_ids.len()
    );
    for p in &summary.points {
        msg.push_str(&format!(
            "k={:<3} mean={:.4} std_trials={:.4}\n",
            p.k, p.grand_mean, p.std_over_trials
        ));
    }
    msg.push_str(&format!("wrote {}\n", out.display()));
    Ok(msg)
}

#[derive(Debug, Serialize)]
struct RandomBaseline {
    seed: u64,
    ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SelectionFile<'a> {
    records: String,
    mode: MuMode,
    threshold: f64,
    set_size: usize,
    high_set: &'a [String],
    low_set: &'a [String],
    random_baseline: RandomBaseline,
    followups: Vec<String>,
}

pub fn cmd_select(args: &SelectArgs) -> Result<String, CliError> {
    let config = load_config(&args.common)?;
    let prepared = config.prepare()?;
    let out = &config.out_dir;
    let records_path = args.records.clone().unwrap_or_else(|| out.join("records.jsonl"));
    let artifact = RunArtifact::read_jsonl(&records_path).map_err(CliError::Other)?;
    if artifact.provenance.dataset_digest != prepared.dataset.digest() {
        return Err(CliError::Config(format!(
            "{} was produced from a different dataset than the configuration describes",
            records_path.display()
        )));
    }
    let mode = args.mode.unwrap_or(config.analytics.mu_mode);
    let set_size = config.analytics.set_size;

    let _lock = DirLock::acquire(out)?;
    let (report, infeasible) = analytics::zscore_report(
        &artifact.records,
        &artifact.provenance.supports,
        mode,
        config.analytics.z_threshold,
        set_size,
    )
    .map_err(|e| CliError::Other(format!("{}: {e}", records_path.display())))?;
    write(&out.join("zscores.json"), to_json(&report))?;
    write(&out.join("zscores.csv"), analytics::zscores_csv(&report))?;
    if let Some(e) = infeasible {
        return Err(analytics_error(e));
    }
    let selection = report.selection.as_ref().expect("feasible selection");

    let pool = prepared.dataset.train();
    if pool.len() < set_size {
        return Err(CliError::Infeasible(format!(
            "random baseline needs {set_size} train exemplars, only {} available",
            pool.len()
        )));
    }
    let baseline_seed = seeding::derive_seed(tag::BASELINE, &[config.run.seed]);
    let mut picked = index::sample(&mut seeding::rng_for(tag::BASELINE, &[baseline_seed]), pool.len(), set_size).into_vec();
    picked.sort_unstable();
    let baseline: Vec<String> = picked.into_iter().map(|i| pool[i].id.clone()).collect();

    let mut followups = Vec::new();
    for (name, ids) in [
        ("high", &selection.high_set),
        ("low", &selection.low_set),
        ("random", &baseline),
    ] {
        let mut follow = config.clone();
        follow.dataset.train_ids = Some(ids.clone());
        follow.run.k = set_size;
        follow.out_dir = out.join(format!("followup_{name}"));
        let file = format!("followup_{name}.toml");
        write(&out.join(&file), follow.to_toml())?;
        followups.push(file);
    }
    let file = SelectionFile {
        records: records_path.display().to_string(),
        mode,
        threshold: config.analytics.z_threshold,
        set_size,
        high_set: &selection.high_set,
        low_set: &selection.low_set,
        random_baseline: RandomBaseline {
            seed: baseline_seed,
            ids: baseline,
        },
        followups,
    };
    write(&out.join("selection.json"), to_json(&file))?;
    Ok(format!(
        "high: {}\nlow: {}\nrandom: {}\nwrote {}\n",
        file.high_set.join(" "),
        file.low_set.join(" "),
        file.random_baseline.ids.join(" "),
        out.display()
    ))
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<String, CliError> {
    let config = load_config(&args.common)?;
    if !matches!(config.backend, BackendConfig::Mock(_)) {
        return Err(CliError::Config("verify needs a mock backend".into()));
    }
    let prepared = config.prepare()?;
    let report = oracle::verify_estimator(
        &config.run,
        &prepared.dataset,
        &*prepared.backend,
        &prepared.template,
        config.verify.tolerance,
    )
    .map_err(|e| match e {
        OracleError::Engine(e) => engine_error(e, None),
        OracleError::TooLarge { .. } | OracleError::Corpus(_) | OracleError::Prompt(_) => CliError::Config(e.to_string()),
        other => CliError::Other(other.to_string()),
    })?;
    let out = &config.out_dir;
    let _lock = DirLock::acquire(out)?;
    write(&out.join("verify.json"), to_json(&report))?;
    let mut msg = String::new();
    for p in &report.points {
        msg.push_str(&format!(
            "k={:<2} estimate={:.6} exact={:.6} error={:.6} tolerance={:.6} {}\n",
            p.k,
            p.grand_mean,
            p.exact_mean,
            p.abs_error,
            p.tolerance,
            if p.pass { "ok" } else { "FAIL" }
        ));
    }
    if report.pass {
        Ok(msg)
    } else {
        eprint!("{msg}");
        Err(CliError::VerifyFailed {
            max_abs_error: report.max_abs_error,
        })
    }
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let artifact = RunArtifact::read_jsonl(&args.records).map_err(CliError::Other)?;
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .records
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let _lock = DirLock::acquire(&out)?;
    write_tables(&artifact, &out)?;
    Ok(format!("wrote {}\n", out.display()))
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Select(a) => cmd_select(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parse `args`, run the command, print its output and return the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Backend {
                checkpoint: Some(path),
                ..
            } = &e
            {
                eprintln!("checkpoint: {} (rerun with --resume to continue)", path.display());
            }
            e.exit_code()
        }
    }
}
