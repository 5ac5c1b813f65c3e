//! `pillargen` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime or data
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pillargen::io::{read_points_file, read_scene_file, write_points_file};
use pillargen::nn::checkpoint;
use pillargen::parallel::thread_count;
use pillargen::plot::write_plots;
use pillargen::synth::gen_dataset;
use pillargen::train::{infer_dataset, load_checkpoint, run_eval, train, write_loss_log};
use pillargen::{Config, Error, Phase};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pillargen", version, about = "Radar point cloud domain translation")]
struct Cli {
    /// Run everything on the calling thread, ignoring PILLARGEN_THREADS.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON config with `grid`, `model`, `train` and `synth` sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (dataset.jsonl and manifest.json).
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one phase and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Scene JSONL file.
        #[arg(long)]
        data: PathBuf,
        /// `opp` or `e2e`.
        #[arg(long)]
        phase: Phase,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Loss CSV path; defaults to the checkpoint path with a `.loss.csv` suffix.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Generate points for every scene of a scene file.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene JSONL file; only the source clouds are used.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output points JSONL file.
        #[arg(long)]
        out: PathBuf,
        /// Keep points whose score is strictly above this; overrides `model.score_threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score generations against target clouds and write a JSON report.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write one SVG per scene of a points file.
    Plot {
        #[command(flatten)]
        config: ConfigArg,
        /// Points JSONL file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Scene JSONL file whose targets are drawn as hollow markers.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(arg: &ConfigArg) -> pillargen::Result<Config> {
    match &arg.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    }
}

fn default_loss_log(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    ckpt.with_file_name(name)
}

fn run(cli: Cli) -> pillargen::Result<ExitCode> {
    let threads = if cli.deterministic { 0 } else { thread_count() };
    match cli.command {
        Command::GenData { config, out, scenes, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.validate()?;
            gen_dataset(&cfg.synth, &cfg.grid, scenes, &out, threads)?;
            log::info!("wrote {scenes} scenes to {}", out.display());
        }
        Command::Train { config, data, phase, init, out, epochs, seed, loss_log } => {
            let mut cfg = load_config(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let scenes = read_scene_file(&data)?;
            let init = init.map(checkpoint::read).transpose()?;
            let outcome = train(&cfg, phase, &scenes, init.as_ref())?;
            outcome.model.save(&out)?;
            let log_path = loss_log.unwrap_or_else(|| default_loss_log(&out));
            write_loss_log(&log_path, &outcome.epochs)?;
            log::info!(
                "{phase}: loss {:.6} -> {:.6}, checkpoint {}",
                outcome.first_loss(),
                outcome.final_loss(),
                out.display()
            );
        }
        Command::Infer { config, ckpt, input, out, threshold } => {
            let mut cfg = load_config(&config)?;
            if let Some(t) = threshold {
                cfg.model.score_threshold = t;
            }
            cfg.validate()?;
            let model = load_checkpoint(&ckpt, &cfg)?;
            let scenes = read_scene_file(&input)?;
            let gens = infer_dataset(&model, &scenes, cfg.model.score_threshold, threads)?;
            write_points_file(&gens, &out)?;
        }
        Command::Eval { config, ckpt, data, report } => {
            let cfg = load_config(&config)?;
            let model = load_checkpoint(&ckpt, &cfg)?;
            let scenes = read_scene_file(&data)?;
            let outcome = run_eval(&model, &scenes, threads)?;
            let r = &outcome.report;
            std::fs::write(&report, r.to_json() + "\n").map_err(|e| Error::Io { path: report.clone(), source: e })?;
            if r.scenes > 0 && r.skipped == r.scenes {
                log::error!("every scene was skipped: no generated point passed the score threshold");
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        Command::Plot { config, input, gt, out } => {
            let cfg = load_config(&config)?;
            let gens = read_points_file(&input)?;
            let gt = gt.map(read_scene_file).transpose()?;
            let files = write_plots(&gens, gt.as_deref(), &cfg.grid, &out)?;
            log::info!("wrote {} plots to {}", files.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            })
        }
    }
}
