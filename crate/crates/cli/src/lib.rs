//! `boter` command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then the TOML file
//! given with `--config`, then individual flags.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use boter_core::artifact;
use boter_core::dataset::ErrorWorld;
use boter_core::pipeline;
use boter_core::{BoterModel, LossMode, RunConfig, Split};
use clap::{Args, Parser, Subcommand};

/// Exit status for runtime failures (I/O, invalid data, divergence).
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for command-line usage errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "boter", version, about = "Learned position-error compensation for six-axis arms")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic error world and a measured dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Sampling and split seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Seed of the synthetic error world.
        #[arg(long)]
        world_seed: Option<u64>,
        /// Dataset CSV; the world and solver targets are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the compensation network.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the checkpoint, history and metrics.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_loss_mode)]
        loss_mode: Option<LossMode>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Report metrics of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve joint-angle compensation for target positions.
    Compensate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV of `x_mm,y_mm,z_mm,j1_deg..j6_deg`.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// World document; when given, true-arm residuals are summarized.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Fit a rigid base-to-world transform from point pairs.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
        /// CSV rows `qx,qy,qz,px,py,pz` in mm.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export normalized distance matrices of predictions and theory.
    ExportDm {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Use at most this many samples of the split.
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: boter_core::Error| e.to_string())
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    match s {
        "spi" => Ok(LossMode::Spi),
        "data_only" | "data-only" => Ok(LossMode::DataOnly),
        other => Err(format!("unknown loss mode `{other}` (expected spi or data_only)")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(boter_core::Error),
}

impl From<boter_core::Error> for Failure {
    fn from(e: boter_core::Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    match &arg.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("missing --{name} (or paths.{name} in the config)")))
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            config,
            seed,
            n,
            world_seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seeds.data = seed;
            }
            if let Some(n) = n {
                cfg.data.samples = n;
            }
            if let Some(seed) = world_seed {
                cfg.seeds.world = seed;
            }
            cfg.validate()?;
            let out = required(out, &cfg.paths.data, "out")?;
            let generated = pipeline::gen_data(&cfg, &out)?;
            let (train, val, test) = generated.set.counts();
            println!(
                "wrote {} samples (train {train}, val {val}, test {test}) to {}",
                generated.set.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            loss_mode,
            quiet,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(epochs) = epochs {
                cfg.train.max_epochs = epochs;
            }
            if let Some(mode) = loss_mode {
                cfg.train.loss_mode = mode;
            }
            cfg.validate()?;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(out, &cfg.paths.out, "out")?;
            let set = pipeline::load_dataset(&cfg, &data)?;
            let outcome = pipeline::train_run(&cfg, &set, &out, |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  l_data {:.6}  l_physics {:.3e}  val MAE3d {:.6}",
                        r.epoch, r.l_data, r.l_physics, r.val_mae_3d
                    );
                }
            })?;
            println!(
                "best epoch {} (val MAE3d {:.6} mm); outputs in {}",
                outcome.history.best_epoch,
                outcome.history.best().map_or(f64::NAN, |r| r.val_mae_3d),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = load_config(&config)?;
            let checkpoint = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = required(data, &cfg.paths.data, "data")?;
            let model = BoterModel::load(&checkpoint)?;
            let set = pipeline::load_dataset(&cfg, &data)?;
            let table = pipeline::eval_run(&model, &set, split)?.table(&split.to_string());
            print!("{table}");
            let _ = std::io::stdout().flush();
            if let Some(out) = out {
                artifact::write_text(&out, &cfg.provenance(), &table)?;
            }
            Ok(())
        }
        Command::Compensate {
            config,
            checkpoint,
            targets,
            world,
            out,
            max_iterations,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = max_iterations {
                cfg.solver.max_iterations = n;
            }
            cfg.validate()?;
            let checkpoint = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let targets = required(targets, &cfg.paths.targets, "targets")?;
            let out = required(out, &cfg.paths.out, "out")?;
            let world = world.or_else(|| cfg.paths.world.clone());
            let model = BoterModel::load(&checkpoint)?;
            let targets = pipeline::load_targets(&targets)?;
            let world = world.as_deref().map(ErrorWorld::load).transpose()?;
            let run = pipeline::compensate_run(&cfg, model, &targets, world.as_ref(), &out)?;
            let converged = run.results.iter().filter(|r| r.converged).count();
            println!("{converged}/{} targets converged; results in {}", run.results.len(), out.display());
            if let Some(summary) = run.summary {
                print!("{}", summary.table());
            }
            Ok(())
        }
        Command::Calibrate { config, input, out } => {
            let cfg = load_config(&config)?;
            let (_, rms) = pipeline::calibrate_run(&cfg, &input, &out)?;
            println!("residual rms {rms:.3e} mm; transform in {}", out.display());
            Ok(())
        }
        Command::ExportDm {
            config,
            checkpoint,
            data,
            split,
            limit,
            out,
        } => {
            let cfg = load_config(&config)?;
            let checkpoint = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(out, &cfg.paths.out, "out")?;
            let model = BoterModel::load(&checkpoint)?;
            let set = pipeline::load_dataset(&cfg, &data)?;
            pipeline::export_distance_maps(&cfg, &model, &set, split, limit, &out)?;
            println!("distance maps written to {}", out.display());
            Ok(())
        }
    }
}
