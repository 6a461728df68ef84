use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cfdiff_cli::commands::{self, CounterfactualJob, Outcome, Overrides};
use cfdiff_cli::settings::Thresholds;
use clap::{Args, Parser, Subcommand};

/// Counterfactual-diffusion lesion localization.
#[derive(Parser)]
#[command(name = "cfdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run config (`key = value` lines under `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Guidance scale.
    #[arg(long)]
    w: Option<f64>,
    /// Encode depth in DDIM steps.
    #[arg(long = "L")]
    encode_steps: Option<usize>,
    /// Dynamic-normalization percentile.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    /// Worker threads, capped by CFDIFF_THREADS.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
            w: self.w,
            encode_steps: self.encode_steps,
            percentile: self.s,
            ddim_steps: self.ddim_steps,
            workers: self.workers,
        }
    }

    fn config(&self) -> Result<cfdiff::io::config::RunConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        commands::load_config(path, &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `run.corpus` (`--out` replaces it).
    Synth(Common),
    /// Train a denoiser and write the checkpoint.
    Train(Common),
    /// Healthy counterfactuals and heatmaps for the images in a container.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        /// Container with an `images` entry.
        #[arg(long)]
        input: PathBuf,
        /// Also write PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Score a checkpoint against the intensity baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score stored heatmaps (`heatmap` and `mask` entries) instead of running a model.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Evaluate the (w, L) grid.
    Sweep(Common),
    /// Evaluate the four cumulative method variants.
    Ablate(Common),
}

fn report(outcome: &Outcome) -> ExitCode {
    if outcome.passed() {
        return ExitCode::SUCCESS;
    }
    for v in &outcome.violations {
        eprintln!("threshold violated: {v}");
    }
    ExitCode::from(2)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(c) => {
            let mut cfg = c.config()?;
            if let Some(out) = &c.out {
                cfg.set("run", "corpus", out.display());
            }
            for p in commands::synth(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train(c) => {
            let r = commands::train_model(&c.config()?)?;
            println!("realized drop fraction {:.4} over {} samples", r.null_fraction, r.samples);
        }
        Command::Counterfactual { common, input, pgm } => {
            let cfg = match &common.config {
                Some(_) => Some(common.config()?),
                None => None,
            };
            let checkpoint = match (&common.checkpoint, &cfg) {
                (Some(p), _) => p.clone(),
                (None, Some(c)) => PathBuf::from(c.get("run", "checkpoint").context("missing key run.checkpoint")?),
                (None, None) => anyhow::bail!("--checkpoint or --config is required"),
            };
            let out = match (&common.out, &cfg) {
                (Some(p), _) => p.clone(),
                (None, Some(c)) => PathBuf::from(c.get("run", "out").context("missing key run.out")?),
                (None, None) => anyhow::bail!("--out or --config is required"),
            };
            let overrides = common.overrides();
            let job = CounterfactualJob {
                checkpoint: &checkpoint,
                input: &input,
                out: &out,
                config: cfg.as_ref(),
                overrides: &overrides,
                pgm,
            };
            for p in commands::counterfactual_files(&job)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { common, heatmaps } => {
            let outcome = match heatmaps {
                Some(path) => {
                    let (limits, out) = match &common.config {
                        Some(_) => {
                            let cfg = common.config()?;
                            let out = cfg.get("run", "out").map(PathBuf::from);
                            (Thresholds::from_run_config(&cfg)?, out)
                        }
                        None => (Thresholds::default(), None),
                    };
                    let out = common.out.clone().or(out).context("--out or --config is required")?;
                    commands::eval_heatmap_file(&path, &out, &limits)?.1
                }
                None => commands::eval(&common.config()?)?.1,
            };
            return Ok(report(&outcome));
        }
        Command::Sweep(c) => return Ok(report(&commands::sweep_grid(&c.config()?)?.1)),
        Command::Ablate(c) => return Ok(report(&commands::ablate(&c.config()?)?.1)),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
