//! `dse`: synthesize, train, invert, edit and evaluate from the command line.
//!
//! Every command reads an optional TOML config (`--config`), applies flag
//! overrides on top, writes the effective config next to its outputs and
//! exits with 0 on success, 1 on a contract violation, 2 on an I/O error and
//! 3 on a configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dse::{DseError, Result};

use crate::config::{InvertMode, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dse", version, about = "Encoder training and inversion for frozen generators")]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration (all defaults included) and exit.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample latents, render them and write a manifest.
    Synth(SynthArgs),
    /// Train an encoder against the configured generator.
    Train(TrainArgs),
    /// Reconstruct real images through encoder and generator.
    Invert(InvertArgs),
    /// Shift style latents along a direction and render.
    Edit(EditArgs),
    /// Compare two aligned image sets.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Output directory; defaults to `<out_dir>/synth`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Output directory; defaults to `<out_dir>/train`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<u8>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    fixed_pool: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct InvertArgs {
    /// Image directory or `id,path` CSV manifest.
    #[arg(long)]
    images: PathBuf,
    /// Output directory; defaults to `<out_dir>/invert`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<InvertMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Encoder checkpoint directory.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["latents", "images"])))]
struct EditArgs {
    /// Latents written by `synth` or `invert`.
    #[arg(long)]
    latents: Option<PathBuf>,
    /// Images to encode first.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Direction directory (manifest plus array).
    #[arg(long)]
    direction: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    alpha: f64,
    /// Comma-separated style layers; all when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Output directory; defaults to `<out_dir>/edit`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Encoder checkpoint directory, for `--images`.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reference images (directory or manifest).
    first: PathBuf,
    /// Images compared against the reference.
    second: PathBuf,
    /// CSV report path; defaults to `<out_dir>/eval/metrics.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    match &cli.command {
        Some(Command::Train(a)) => {
            let t = &mut cfg.train;
            if let Some(s) = a.strategy {
                t.strategy = dse::Strategy::from_number(s)?;
            }
            t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.samples_per_epoch = a.samples_per_epoch.unwrap_or(t.samples_per_epoch);
            t.max_steps = a.max_steps.or(t.max_steps);
            t.fixed_pool = a.fixed_pool.or(t.fixed_pool);
            t.checkpoint_every = a.checkpoint_every.or(t.checkpoint_every);
        }
        Some(Command::Invert(a)) => {
            let i = &mut cfg.invert;
            i.mode = a.mode.unwrap_or(i.mode);
            i.steps = a.steps.unwrap_or(i.steps);
            i.learning_rate = a.learning_rate.unwrap_or(i.learning_rate);
            if a.encoder.is_some() {
                cfg.encoder.checkpoint = a.encoder.clone();
            }
        }
        Some(Command::Edit(a)) if a.encoder.is_some() => cfg.encoder.checkpoint = a.encoder.clone(),
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.show_config {
        print!("{}", cfg.effective().to_toml()?);
        return Ok(());
    }
    let out = |given: &Option<PathBuf>, sub: &str| given.clone().unwrap_or_else(|| cfg.out_dir.join(sub));
    match &cli.command {
        None => Err(DseError::Config("no command given; see `dse --help`".into())),
        Some(Command::Synth(a)) => commands::synth(&cfg, a.count, &out(&a.out, "synth")),
        Some(Command::Train(a)) => commands::train(&cfg, &out(&a.out, "train")),
        Some(Command::Invert(a)) => commands::invert(&cfg, &a.images, &out(&a.out, "invert")),
        Some(Command::Edit(a)) => {
            let source = match (&a.latents, &a.images) {
                (Some(p), _) => commands::EditSource::Latents(p.clone()),
                (None, Some(p)) => commands::EditSource::Images(p.clone()),
                (None, None) => return Err(DseError::Config("edit needs --latents or --images".into())),
            };
            commands::edit(&cfg, &source, &a.direction, a.alpha, a.layers.clone(), &out(&a.out, "edit"))
        }
        Some(Command::Eval(a)) => {
            let csv = a.csv.clone().unwrap_or_else(|| cfg.out_dir.join("eval").join("metrics.csv"));
            commands::eval(&cfg, &a.first, &a.second, &csv)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
