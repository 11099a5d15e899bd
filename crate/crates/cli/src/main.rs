//! Experiment front end: train watermark models, score checkpoints over
//! attack grids, render plots, and run the standard ablation pairs.
//!
//! Every command reads one TOML config (all fields optional, defaults are
//! the reference setup), stamps its hash into the artifacts it writes, and
//! is deterministic given the config and seed. Relative output paths
//! resolve under `CATMARK_OUT_ROOT` when that variable is set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};

use catmark::config::{Backbone, Mode, RunConfig};
use catmark::data::Dataset;
use catmark::evalharness::{
    build_grid, evaluate, export_report, import_json, transfer_eval, EvalContext, EvalReport,
    ExportFormat, GridMode,
};
use catmark::plot;
use catmark::training::{self, CheckpointMeta, Trainer};
use catmark::watermark;

const OUT_ROOT_ENV: &str = "CATMARK_OUT_ROOT";

#[derive(Parser)]
#[command(name = "catmark", version, about = "adversarially trained image watermarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs, checkpoints, and a run manifest
    Train(TrainArgs),
    /// Score a checkpoint over an attack grid and export the report
    Eval(EvalArgs),
    /// Render training curves and report charts from a run directory
    Report(ReportArgs),
    /// Train an ablation pair differing in exactly one setting
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cat,
    Random,
    Noaug,
    Ucb,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Cat => Mode::Cat,
            ModeArg::Random => Mode::Random,
            ModeArg::Noaug => Mode::Noaug,
            ModeArg::Ucb => Mode::Ucb,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    /// One primitive per cell, full parameter sweep
    Single,
    /// All ordered primitive pairs over the reduced grid
    Compositional,
    /// Compositional grid for a model trained at depth 1
    Forward,
    /// Single-step grid for a model trained at depth 2
    Backward,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Both,
}

impl From<FormatArg> for ExportFormat {
    fn from(f: FormatArg) -> ExportFormat {
        match f {
            FormatArg::Csv => ExportFormat::Csv,
            FormatArg::Json => ExportFormat::Json,
            FormatArg::Both => ExportFormat::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    /// Entropy bonus on vs off (lambda_ent 0.1 vs 0)
    Entropy,
    /// Controller backbone swap
    Backbone,
    /// Learned adversary vs bandit attack selection
    Ucb,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; unset fields take the reference defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode override
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Attack depth T override
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2))]
    depth: Option<u64>,
    /// Message length override, in bits
    #[arg(long)]
    payload: Option<usize>,
    /// Run seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: runs/<mode>-d<depth>-s<seed>-<hash>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file or run directory (its newest checkpoint)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Attack grid to score
    #[arg(long, value_enum)]
    mode: EvalModeArg,
    /// Image directory evaluated in full (default: the run's test split)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory (default: <run>/eval)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation stream seed (default: the run seed)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Both)]
    format: FormatArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding log.csv and exported reports
    #[arg(long)]
    run: PathBuf,
    /// Plot directory (default: <run>/plots)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Which setting the pair of runs differs in
    #[arg(long, value_enum)]
    which: WhichArg,
    /// Config file shared by both runs
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed shared by both runs
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the two runs (default: runs/ablate-<which>)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Relative paths land under `CATMARK_OUT_ROOT` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn apply_train_overrides(config: &mut RunConfig, args: &TrainArgs) {
    if let Some(mode) = args.mode {
        config.train.mode = mode.into();
    }
    if let Some(depth) = args.depth {
        config.adversary.depth = depth as usize;
    }
    if let Some(payload) = args.payload {
        config.model.payload_bits = payload;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = load_or_default(args.config.as_deref())?;
    apply_train_overrides(&mut config, &args);

    let out = match (&args.out, config.out_dir.is_empty()) {
        (Some(p), _) => p.clone(),
        (None, false) => PathBuf::from(&config.out_dir),
        // Hash of the config before the directory name is folded back in.
        (None, true) => PathBuf::from(format!(
            "runs/{}-d{}-s{}-{}",
            config.train.mode.label(),
            config.adversary.depth,
            config.seed,
            config.short_hash()
        )),
    };
    config.out_dir = resolve_out(&out).display().to_string();
    config.validate()?;

    let artifacts = training::train(&config, &Device::Cpu)?;
    if let Some(epoch) = artifacts.resumed_from_epoch {
        println!("resumed after epoch {epoch}");
    }
    println!("run dir        {}", artifacts.out_dir.display());
    println!("log            {}", artifacts.log_path.display());
    println!("checkpoint     {}", artifacts.checkpoint_path.display());
    println!("manifest       {}", artifacts.manifest_path.display());
    println!("val bit error  {:.4}", artifacts.final_val_bit_error);
    Ok(())
}

/// Accepts a run directory or one of its checkpoint files and returns the
/// run directory plus the checkpoint tensor path and metadata.
fn locate_checkpoint(arg: &Path) -> Result<(PathBuf, PathBuf, CheckpointMeta)> {
    if arg.is_dir() {
        let found = training::find_latest_checkpoint(arg)?
            .with_context(|| format!("no checkpoint in {}", arg.display()))?;
        return Ok((arg.to_path_buf(), found.0, found.1));
    }
    let json_path = arg.with_extension("json");
    let tensor_path = arg.with_extension("safetensors");
    if !json_path.exists() || !tensor_path.exists() {
        bail!(
            "checkpoint {} needs both a .safetensors and a .json file",
            arg.display()
        );
    }
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
        .with_context(|| format!("parsing {}", json_path.display()))?;
    let run_dir = arg.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((run_dir, tensor_path, meta))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let device = Device::Cpu;
    let (run_dir, tensor_path, meta) = locate_checkpoint(&args.checkpoint)?;
    let config_path = run_dir.join("config.toml");
    let config = RunConfig::load(&config_path)
        .with_context(|| format!("loading run config {}", config_path.display()))?;

    let mut trainer = Trainer::new(&config, &device)?;
    trainer.load_checkpoint(&tensor_path, &meta)?;

    let pool = match &args.data {
        Some(dir) => Dataset::from_dir(dir, config.dataset.resolution, config.seed, &device)?
            .all_images()
            .clone(),
        None => config.build_dataset(&device)?.test_images()?,
    };

    // Embedding strength the checkpoint last trained at.
    let alpha = watermark::alpha_schedule(meta.epochs_done.saturating_sub(1), config.train.epochs);
    let ctx = EvalContext {
        seed: args.seed.unwrap_or(config.seed),
        samples: config.eval.samples,
        alpha,
        config_hash: config.hash(),
        checkpoint: tensor_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };

    let report = match args.mode {
        EvalModeArg::Single => {
            let grid = build_grid(GridMode::SingleStep, &config.eval)?;
            evaluate(&trainer.model, &pool, &grid, "single", &ctx)?
        }
        EvalModeArg::Compositional => {
            let grid = build_grid(GridMode::Compositional, &config.eval)?;
            evaluate(&trainer.model, &pool, &grid, "compositional", &ctx)?
        }
        EvalModeArg::Forward => transfer_eval(&trainer.model, &pool, &config.eval, 1, &ctx)?,
        EvalModeArg::Backward => transfer_eval(&trainer.model, &pool, &config.eval, 2, &ctx)?,
    };

    let out_dir = args.out.map(|p| resolve_out(&p)).unwrap_or_else(|| run_dir.join("eval"));
    let written = export_report(&report, &out_dir, args.format.into())?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!(
        "cells {}  bit accuracy {:.4}  capacity {:.2} bits",
        report.overall.cells, report.overall.bit_accuracy, report.overall.capacity_bits
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let run = &args.run;
    let out_dir = args.out.map(|p| resolve_out(&p)).unwrap_or_else(|| run.join("plots"));
    let mut written = Vec::new();

    let records = training::read_log(&run.join("log.csv"))?;
    if !records.is_empty() {
        written.extend(plot::plot_training_curves(&records, &out_dir)?);
    }

    for report in find_reports(run)? {
        written.extend(plot::plot_family_bars(&report, &out_dir)?);
    }

    if written.is_empty() {
        bail!("nothing to plot in {} (no log.csv, no eval_*.json)", run.display());
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Exported JSON reports in the run directory and its eval/ subdirectory.
fn find_reports(run: &Path) -> Result<Vec<EvalReport>> {
    let mut paths = Vec::new();
    for dir in [run.to_path_buf(), run.join("eval")] {
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("eval_") && name.ends_with(".json") {
                paths.push(path);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| Ok(import_json(p)?)).collect()
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let mut base = load_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    let which = match args.which {
        WhichArg::Entropy => "entropy",
        WhichArg::Backbone => "backbone",
        WhichArg::Ucb => "ucb",
    };
    let parent = resolve_out(
        &args.out.unwrap_or_else(|| PathBuf::from(format!("runs/ablate-{which}"))),
    );

    let variants: Vec<(String, RunConfig)> = match args.which {
        WhichArg::Entropy => [0.0, 0.1]
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.adversary.lambda_ent = v;
                (format!("lambda-ent-{v}"), c)
            })
            .collect(),
        WhichArg::Backbone => [(Backbone::TinyConv, "tiny-conv"), (Backbone::ResnetStyle, "resnet-style")]
            .iter()
            .map(|&(b, name)| {
                let mut c = base.clone();
                c.adversary.backbone = b;
                (format!("backbone-{name}"), c)
            })
            .collect(),
        WhichArg::Ucb => [Mode::Cat, Mode::Ucb]
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.train.mode = m;
                (format!("mode-{}", m.label()), c)
            })
            .collect(),
    };

    for (name, mut config) in variants {
        config.out_dir = parent.join(&name).display().to_string();
        config.validate()?;
        let artifacts = training::train(&config, &Device::Cpu)?;
        println!(
            "{name}: val bit error {:.4} ({})",
            artifacts.final_val_bit_error,
            artifacts.out_dir.display()
        );
    }
    Ok(())
}
