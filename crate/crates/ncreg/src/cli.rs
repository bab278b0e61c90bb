//! The `ncreg` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncreg_core::{
    evaluate, icp_baseline, register, train, LabeledPair, MetricReport, NetworkParams, RegistrationConfig,
    RigidTransform,
};
use sha2::{Digest, Sha256};

use crate::cloud_io::{read_cloud, CloudFormat};
use crate::config::RunConfig;
use crate::error::{write_text, CliError, CliResult};
use crate::manifest::{read_manifest, write_manifest, GenSpec, ManifestRecord};
use crate::report::{bench_csv, checkpoint_meta, eval_csv, history_csv, mean_metrics, RegisterReport};
use crate::weights::{load_weights, save_weights};

/// Iteration cap and stopping tolerance of the ICP baseline.
pub const ICP_MAX_ITERS: usize = 100;
pub const ICP_TOL: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "ncreg", version, about = "Neighborhood-consensus point cloud registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Train network weights on the pairs of a manifest.
    Train(TrainArgs),
    /// Per-pair metrics of trained weights on a manifest.
    Eval(EvalArgs),
    /// Write a dataset manifest from a generation spec.
    Gen(GenArgs),
    /// Mean metrics of the network and a baseline on a manifest.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub source: PathBuf,
    pub target: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides format detection from the file extensions.
    #[arg(long)]
    pub format: Option<CloudFormat>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_weights: PathBuf,
    /// Pairs scored after every epoch.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Per-epoch CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// TOML generation spec.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out_manifest: PathBuf,
    /// Supplies the noise preset when the spec names none.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Icp,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, value_enum, default_value = "icp")]
    pub baseline: Baseline,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Register(a) => run_register(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Gen(a) => run_gen(&a),
        Command::Bench(a) => run_bench(&a),
    }
}

fn cloud_format(path: &Path, forced: Option<CloudFormat>) -> CliResult<CloudFormat> {
    forced
        .or_else(|| CloudFormat::from_path(path))
        .ok_or_else(|| CliError::Config(format!("{}: cannot tell the cloud format; pass --format", path.display())))
}

fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Weights are checked against the configured architecture so a mismatched
/// config cannot be silently ignored.
fn load_checked(path: &Path, cfg: &RunConfig) -> CliResult<NetworkParams> {
    let params = load_weights(path)?;
    if params.config() != &cfg.net()? {
        return Err(CliError::Config(format!(
            "{} was trained for a different network than the configuration describes",
            path.display()
        )));
    }
    Ok(params)
}

pub fn run_register(a: &RegisterArgs) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let params = load_checked(&a.weights, &cfg)?;
    let source = read_cloud(&a.source, cloud_format(&a.source, a.format)?)?;
    let target = read_cloud(&a.target, cloud_format(&a.target, a.format)?)?;
    let result = register(&source, &target, &params, &cfg.registration()?)?;
    let report = RegisterReport {
        source: a.source.display().to_string(),
        target: a.target.display().to_string(),
        source_points: source.len(),
        target_points: target.len(),
        transform: result.transform.to_rows(),
        iterations: RegisterReport::iteration_docs(&result),
        total_loss: result.total_loss(),
        config_hash: cfg.hash(),
        weights_sha256: file_sha256(&a.weights)?,
        seed: cfg.training.seed,
    };
    write_text(&a.out, &report.to_json()?)
}

fn generate_all(records: &[ManifestRecord]) -> CliResult<Vec<LabeledPair>> {
    records.iter().map(ManifestRecord::generate).collect()
}

pub fn run_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let train_cfg = cfg.train_config()?;
    let records = read_manifest(&a.manifest)?;
    let pairs = generate_all(&records)?;
    let holdout = match &a.holdout {
        Some(p) => generate_all(&read_manifest(p)?)?,
        None => Vec::new(),
    };
    let (params, history) = train(&pairs, &holdout, &train_cfg)?;
    for e in &history.epochs {
        eprintln!("epoch {:>3}  loss {:.6}  skipped {}", e.epoch + 1, e.loss.total, e.skipped);
    }
    save_weights(&params, &a.out_weights)?;
    let mut meta = a.out_weights.clone().into_os_string();
    meta.push(".meta");
    write_text(
        Path::new(&meta),
        &checkpoint_meta(history.epochs.len(), &cfg.hash(), train_cfg.seed, pairs.len()),
    )?;
    if let Some(h) = &a.history {
        write_text(h, &history_csv(&history))?;
    }
    Ok(())
}

/// Registration of one pair; a failed solve scores as the identity.
fn predict(pair: &LabeledPair, params: &NetworkParams, cfg: &RegistrationConfig, id: usize) -> RigidTransform {
    match register(&pair.source, &pair.target, params, cfg) {
        Ok(r) => r.transform,
        Err(e) => {
            eprintln!("pair {id}: {e}; scored as identity");
            RigidTransform::identity()
        }
    }
}

pub fn run_eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let params = load_checked(&a.weights, &cfg)?;
    let reg = cfg.registration()?;
    let records = read_manifest(&a.manifest)?;
    let mut rows = Vec::with_capacity(records.len());
    for rec in &records {
        let pair = rec.generate()?;
        let pred = predict(&pair, &params, &reg, rec.id);
        rows.push((rec.id, rec.seed, evaluate(&pred, &pair.gt, &pair.source, &pair.target)));
    }
    write_text(&a.out, &eval_csv(&rows))
}

pub fn run_gen(a: &GenArgs) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let spec = GenSpec::parse(&crate::error::read_text(&a.spec)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.spec.display())))?;
    write_manifest(&spec.records(cfg.noise()?)?, &a.out_manifest)
}

pub fn run_bench(a: &BenchArgs) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let params = load_checked(&a.weights, &cfg)?;
    let reg = cfg.registration()?;
    let records = read_manifest(&a.manifest)?;
    let (mut ours, mut base): (Vec<MetricReport>, Vec<MetricReport>) = (Vec::new(), Vec::new());
    for rec in &records {
        let pair = rec.generate()?;
        let pred = predict(&pair, &params, &reg, rec.id);
        ours.push(evaluate(&pred, &pair.gt, &pair.source, &pair.target));
        let icp = match a.baseline {
            Baseline::Icp => icp_baseline(&pair.source, &pair.target, ICP_MAX_ITERS, ICP_TOL),
        };
        base.push(evaluate(&icp, &pair.gt, &pair.source, &pair.target));
    }
    let table = bench_csv(&[
        ("ncreg".to_string(), mean_metrics(&ours)),
        ("icp".to_string(), mean_metrics(&base)),
    ]);
    write_text(&a.out, &table)
}
