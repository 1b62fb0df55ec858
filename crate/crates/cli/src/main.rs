//! `adld`: dataset generation, training, evaluation, gradient checks and
//! metric plots.
//!
//! Exit codes: 0 success, 2 I/O or unreadable file, 3 bad arguments or
//! inputs, 4 training divergence, 5 gradient-check failure.
//! Diagnostics go to stderr; stdout carries only paths and JSON.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adld::checkpoint::{Checkpoint, INDEX_FILE};
use adld::evaluation::{f1_frame, predict};
use adld::networks::Domain;
use adld::opcheck;
use adld::synthdata::{empirical_rates, read_dataset, sample_domain, write_dataset, AuSet, DomainConfig, SampleRecord, Split, MANIFEST_FILE};
use adld::training::{latest_checkpoint, train, Feed, Mode, METRICS_FILE};
use adld::Real;
use anyhow::{anyhow, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;

/// Effective run configuration, echoed into every training run directory.
const RUN_CONFIG_FILE: &str = "config.ini";
/// Generation settings, written next to every dataset manifest.
const DATASET_INFO_FILE: &str = "dataset.json";

#[derive(Parser)]
#[command(name = "adld", version, about = "Cross-domain AU detection through a latent feature domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => Err(format!("unknown domain '{s}' (expected source or target)")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: adld::Error| e.to_string())
}

fn parse_feed(s: &str) -> Result<Feed, String> {
    s.parse().map_err(|e: adld::Error| e.to_string())
}

fn parse_au_set(s: &str) -> Result<AuSet, String> {
    AuSet::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of one domain.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_domain)]
        domain: Domain,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Crop side `l`.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long = "au-set", default_value = "bp4d6", value_parser = parse_au_set)]
        au_set: AuSet,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// Pseudo-label flip probability (target only).
        #[arg(long = "flip-rate", default_value_t = 0.25)]
        flip_rate: f64,
    },
    /// Train one mode; writes metrics.csv, per-epoch checkpoints and the
    /// effective config under --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Continue from the latest checkpoint under --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a labelled dataset; writes a JSON report.
    Eval {
        /// A checkpoint directory, or a run directory (latest checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_domain)]
        domain: Domain,
        /// Target feed; defaults to the run's configured feed.
        #[arg(long, value_parser = parse_feed)]
        feed: Option<Feed>,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose [eval] section supplies threshold and batch.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Consecutive seeds per op, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Perturb every backward rule; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// SVG line chart of metrics.csv columns.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated column names.
        #[arg(long, default_value = "total")]
        series: String,
    },
}

#[derive(Debug)]
struct GradcheckFailed(Vec<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<GradcheckFailed>().is_some() {
            return 5;
        }
        if let Some(e) = cause.downcast_ref::<adld::Error>() {
            return match e {
                adld::Error::Io(_) | adld::Error::Json(_) | adld::Error::Format(_) => 2,
                adld::Error::Divergence { .. } => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(3);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `ADLD_THREADS`: unset uses every core, 0 forces one thread.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ADLD_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| adld::Error::Config(format!("ADLD_THREADS must be an integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("thread pool")?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, domain, count, seed, size, au_set, split, flip_rate } => {
            gen_data(&out, domain, count, seed, size, au_set, split, flip_rate)
        }
        Command::Train { config, source, target, out, mode, resume } => {
            cmd_train(config.as_deref(), source, target, &out, mode, resume)
        }
        Command::Eval { checkpoint, data, domain, feed, out, config } => {
            cmd_eval(&checkpoint, &data, domain, feed, &out, config.as_deref())
        }
        Command::Gradcheck { op, seed, seeds, corrupt } => gradcheck(&op, seed, seeds, corrupt),
        Command::Plot { metrics, out, series } => cmd_plot(&metrics, &out, &series),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    domain: Domain,
    count: usize,
    seed: u64,
    size: usize,
    au_set: AuSet,
    split: Split,
    flip_rate: f64,
) -> Result<()> {
    if count == 0 {
        return Err(adld::Error::Config("--count must be positive".into()).into());
    }
    let cfg = DomainConfig { flip_rate, ..DomainConfig::new(domain, split, size, au_set) };
    cfg.validate()?;
    // Every sample owns its seed, so the thread count cannot change output.
    let records: Vec<SampleRecord> =
        (0..count as u64).into_par_iter().map(|i| sample_domain(&cfg, i, seed)).collect::<adld::Result<_>>()?;
    write_dataset(&records, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let info = json!({ "generator": cfg, "seed": seed, "count": count });
    fs::write(out.join(DATASET_INFO_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    let rates = empirical_rates(&records, au_set.aus().len());
    let named: serde_json::Map<String, serde_json::Value> =
        au_set.aus().iter().zip(&rates).map(|(a, r)| (format!("AU{a}"), json!(r))).collect();
    println!("{}", json!({ "manifest": out.join(MANIFEST_FILE), "count": count, "rates": named }));
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_records(dir: &Path) -> Result<Vec<SampleRecord>> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn cmd_train(
    config: Option<&Path>,
    source: Option<PathBuf>,
    target: Option<PathBuf>,
    out: &Path,
    mode: Option<Mode>,
    resume: bool,
) -> Result<()> {
    let mut rc = load_run_config(config)?;
    if let Some(m) = mode {
        rc.mode = m;
    }
    rc.source = source.or(rc.source);
    rc.target = target.or(rc.target);
    let cfg = rc.train_config();
    cfg.validate()?;
    let missing = |what: &str| adld::Error::Config(format!("mode {} needs a {what} dataset (--{what} or [data] {what})", rc.mode));
    let src = match (&rc.source, rc.mode.uses_source()) {
        (Some(p), true) => load_records(p)?,
        (None, true) => return Err(missing("source").into()),
        (_, false) => Vec::new(),
    };
    let tgt = match (&rc.target, rc.mode.uses_target()) {
        (Some(p), true) => load_records(p)?,
        (None, true) => return Err(missing("target").into()),
        (_, false) => Vec::new(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RUN_CONFIG_FILE), rc.to_text())?;
    let outcome = train(&cfg, &src, &tgt, out, resume, &mut |_| Ok(()))?;
    if outcome.clipped_steps > 0 {
        log::info!("{} of {} steps had clipped gradients", outcome.clipped_steps, outcome.iterations);
    }
    println!(
        "{}",
        json!({
            "run": out,
            "metrics": out.join(METRICS_FILE),
            "checkpoint": outcome.checkpoints.last(),
            "iterations": outcome.iterations,
        })
    );
    Ok(())
}

/// Column AU ids of a model with `m` outputs.
fn au_ids(m: usize) -> Vec<u8> {
    [AuSet::Bp4d6, AuSet::Gft4]
        .into_iter()
        .map(AuSet::aus)
        .find(|a| a.len() == m)
        .map(<[u8]>::to_vec)
        .unwrap_or_else(|| (1..=m as u8).collect())
}

fn cmd_eval(checkpoint: &Path, data: &Path, domain: Domain, feed: Option<Feed>, out: &Path, config: Option<&Path>) -> Result<()> {
    let rc = load_run_config(config)?;
    let dir = if checkpoint.join(INDEX_FILE).exists() {
        checkpoint.to_path_buf()
    } else {
        latest_checkpoint(checkpoint)?.ok_or_else(|| anyhow!(adld::Error::Format(format!("no checkpoint under {}", checkpoint.display()))))?
    };
    let ck = Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let records = load_records(data)?;
    if records.is_empty() {
        return Err(adld::Error::InsufficientData(format!("dataset {} is empty", data.display())).into());
    }
    let labels: Vec<Vec<u8>> = records
        .iter()
        .map(|r| r.aus.clone().ok_or_else(|| adld::Error::Label(format!("record {} has no AU labels", r.id))))
        .collect::<adld::Result<_>>()?;
    let mode = ck.meta.config.mode;
    let feed = match domain {
        Domain::Source => None,
        Domain::Target => Some(feed.unwrap_or(ck.meta.config.eval_feed)),
    };
    if feed == Some(Feed::Latent) && !mode.is_latent() {
        return Err(adld::Error::Config(format!("mode {mode} has no generator; use --feed raw")).into());
    }
    let probs = predict(&ck.model, &records, feed, rc.eval_batch)?;
    let mut report = f1_frame(&probs, &labels, &au_ids(ck.meta.config.au_count), rc.threshold)?;
    report.mode = Some(mode);
    report.feed = feed;
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("{}", json!({ "report": out, "avg_f1": report.avg_f1, "samples": report.samples }));
    Ok(())
}

fn gradcheck(op: &str, seed: u64, seeds: u64, corrupt: bool) -> Result<()> {
    let ops: Vec<&str> = if op == "all" {
        opcheck::OPS.to_vec()
    } else if opcheck::OPS.contains(&op) {
        vec![op]
    } else {
        return Err(adld::Error::Config(format!("unknown op '{op}'; known: all, {}", opcheck::OPS.join(", "))).into());
    };
    if seeds == 0 {
        return Err(adld::Error::Config("--seeds must be positive".into()).into());
    }
    let results = opcheck::run::<Real>(&ops, seed, seeds, corrupt)?;
    let mut failed = Vec::new();
    println!("op\tmax_rel_error\tnorm_rel_error\tstatus");
    for (name, r) in &results {
        let ok = r.max_rel_error < opcheck::TOLERANCE;
        println!("{name}\t{:.3e}\t{:.3e}\t{}", r.max_rel_error, r.norm_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(GradcheckFailed(failed).into())
    }
}

fn cmd_plot(metrics: &Path, out: &Path, series: &str) -> Result<()> {
    let names: Vec<String> = series.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if names.is_empty() {
        return Err(adld::Error::Config("--series names no column".into()).into());
    }
    let csv = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let data = plot::read_series(&csv, &names)?;
    fs::write(out, plot::render_svg(&data)).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}
