//! File formats, run configuration and the `pip-hsi` command line.
//!
//! - [`cube`]: hyperspectral cube files with label sidecars.
//! - [`transfer_io`]: fitted pixel transfer models and raw samples.
//! - [`checkpoint`]: versioned model checkpoints.
//! - [`config`]: the TOML run configuration.
//! - [`commands`]: the subcommands, each producing a [`report::Report`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cube;
pub mod error;
pub mod header;
pub mod report;
pub mod transfer_io;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use pip_hsi_core::data::SynthParams;

use crate::config::{Arch, BasisChoice, EnergySection, ModelConfig, RunConfig, TransferSection, Variant};
use crate::cube::{Encoding, WriteOptions};
use crate::error::{CliError, Result};
use crate::report::{Report, ReportFormat};

#[derive(Debug, Parser)]
#[command(name = "pip-hsi", version, about = "Processing-in-pixel hyperspectral classification toolkit")]
pub struct Cli {
    /// Seed for every random draw; overrides the config file's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Force sequential reductions. Training is always sequential, so results
    /// are reproducible with or without this flag.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the pixel behavioral model, fit a transfer function and save it.
    FitTransfer(FitTransferArgs),
    /// Train the configured model, save a checkpoint and report test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval(EvalArgs),
    /// First-layer compression factors.
    CompressReport(CompressArgs),
    /// Sensing, communication and compute energy of baseline, POP and PIP runs.
    EnergyReport(EnergyArgs),
    /// Train the cumulative CNN-3D ablation ladder and report AA changes.
    Ablate(AblateArgs),
    /// Generate a synthetic labeled cube.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Report layout on stdout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Both)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct FitTransferArgs {
    /// Run configuration; its `[transfer]` section supplies the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Destination of the fitted model.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw samples as CSV.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub basis: Option<BasisArg>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub n_w: Option<usize>,
    #[arg(long)]
    pub n_x: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BasisArg {
    Polynomial,
    Tanh,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override `[train] epochs`; the learning-rate milestones scale with it
    /// unless set explicitly. `0` saves and evaluates the initialized model.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Directory for `model.ckpt`, `history.csv` and `report.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Report the configured model on its data instead of the reference rows.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    /// Supplies the architecture, data dimensions and `[energy]` constants.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture when no config is given.
    #[arg(long, value_enum, default_value_t = ArchArg::Cnn3d)]
    pub arch: ArchArg,
    /// Spectral bands when no config is given.
    #[arg(long, default_value_t = 180)]
    pub bands: usize,
    /// Classes when no config is given.
    #[arg(long, default_value_t = 14)]
    pub classes: usize,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchArg {
    Cnn3d,
    Cnn32h,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Directory for `ablation.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Cube path; labels go next to it with a `.labels` extension.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub bands: usize,
    #[arg(long, default_value_t = 40)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Write delimited text instead of binary.
    #[arg(long)]
    pub text: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) | CliError::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn emit(out: &mut dyn Write, report: &Report, format: ReportFormat, file: Option<&Path>) -> Result<()> {
    let text = report.render(format);
    out.write_all(text.as_bytes()).map_err(CliError::io(Path::new("<stdout>")))?;
    if let Some(path) = file {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        fs::write(path, text).map_err(CliError::io(path))?;
    }
    Ok(())
}

/// Runs a parsed command, writing reports to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    info!("command={:?} seed={:?} deterministic={}", command_name(&cli.command), cli.seed, cli.deterministic);
    match &cli.command {
        Command::FitTransfer(a) => {
            let (mut t, seed) = match &a.config {
                Some(p) => {
                    let (cfg, seed) = commands::load_config(p, cli.seed)?;
                    (cfg.transfer, seed)
                }
                None => (TransferSection::default(), cli.seed.unwrap_or(0)),
            };
            if let Some(b) = a.basis {
                t.basis = match b {
                    BasisArg::Polynomial => BasisChoice::Polynomial,
                    BasisArg::Tanh => BasisChoice::Tanh,
                };
            }
            t.degree = a.degree.unwrap_or(t.degree);
            t.n_w = a.n_w.unwrap_or(t.n_w);
            t.n_x = a.n_x.unwrap_or(t.n_x);
            t.noise_sigma = a.noise_sigma.unwrap_or(t.noise_sigma);
            let fit = commands::fit_transfer(&t, seed)?;
            transfer_io::write_transfer(&a.out, &fit.model)?;
            if let Some(s) = &a.samples {
                transfer_io::write_samples(s, &fit.samples)?;
            }
            emit(out, &commands::fit_report(&fit, &t), a.output.format, None)
        }
        Command::Train(a) => {
            let (cfg, seed) = commands::load_config(&a.config, cli.seed)?;
            let dir = commands::output_dir(a.out.as_deref(), Some(&cfg));
            let artifacts = commands::cmd_train(&cfg, seed, a.epochs, &dir)?;
            info!("checkpoint={}", artifacts.checkpoint.display());
            emit(out, &artifacts.report, a.output.format, Some(&dir.join("report.txt")))
        }
        Command::Eval(a) => {
            let (cfg, seed) = commands::load_config(&a.config, cli.seed)?;
            let report = commands::cmd_eval(&cfg, seed, &a.checkpoint)?;
            emit(out, &report, a.output.format, a.out.as_deref())
        }
        Command::CompressReport(a) => {
            let report = match &a.config {
                Some(p) => {
                    let (cfg, seed) = commands::load_config(p, cli.seed)?;
                    commands::configured_compress_report(&cfg, seed)?
                }
                None => commands::reference_compress_report()?,
            };
            emit(out, &report, a.output.format, a.out.as_deref())
        }
        Command::EnergyReport(a) => {
            let (model, bands, classes, energy) = match &a.config {
                Some(p) => {
                    let (cfg, seed) = commands::load_config(p, cli.seed)?;
                    let (scene, _) = commands::load_scenes(&cfg, seed)?;
                    (cfg.model.clone(), scene.bands, scene.n_classes().max(1), cfg.energy.clone())
                }
                None => {
                    let arch = match a.arch {
                        ArchArg::Cnn3d => Arch::Cnn3d,
                        ArchArg::Cnn32h => Arch::Cnn32h,
                    };
                    (ModelConfig::new(arch, Variant::Custom), a.bands, a.classes, EnergySection::default())
                }
            };
            let (base, custom) = commands::variant_pair(&model)?;
            let report = commands::energy_report(&base.build(bands, classes), &custom.build(bands, classes), &energy)?;
            emit(out, &report, a.output.format, a.out.as_deref())
        }
        Command::Ablate(a) => {
            let (cfg, seed) = commands::load_config(&a.config, cli.seed)?;
            let results = commands::run_ablation(&cfg, seed, a.epochs)?;
            let dir = a.out.clone().or_else(|| cfg.output_dir.as_ref().map(|p| cfg.resolve(p)));
            let file = dir.map(|d| d.join("ablation.txt"));
            emit(out, &commands::ablation_report(&results), a.output.format, file.as_deref())
        }
        Command::Synth(a) => {
            let params = SynthParams {
                noise: a.noise,
                ..SynthParams::new(a.classes, a.bands, a.size, a.separation, cli.seed.unwrap_or(0))
            };
            let opts = WriteOptions {
                encoding: if a.text { Encoding::Text } else { Encoding::Binary },
                ..WriteOptions::default()
            };
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(CliError::io(dir))?;
            }
            emit(out, &commands::cmd_synth(&params, &a.out, opts)?, a.output.format, None)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::FitTransfer(_) => "fit-transfer",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::CompressReport(_) => "compress-report",
        Command::EnergyReport(_) => "energy-report",
        Command::Ablate(_) => "ablate",
        Command::Synth(_) => "synth",
    }
}

/// Loads a config for library callers that bypass argument parsing.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
}
