//! Command-line surface for the adaptive label smoothing toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use error::{exit, CliError, CliResult};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "als", version, about = "Adaptive label smoothing with self-knowledge distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config value by dotted path, e.g. `training.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Override `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            set: self.set.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write diagnostics, checkpoints and calibration.
    Train(ConfigArgs),
    /// Train every `[[ablation.variants]]` entry on the same data and seed.
    Ablation(ConfigArgs),
    /// Gradient rescaling experiments.
    #[command(subcommand)]
    Gradlab(Gradlab),
    /// ECE/MCE report for a `confidence,correct` CSV.
    Calibrate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = als_core::calibration::DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Gradlab {
    /// Per-class rescaling ratios for random student/teacher pairs.
    Ratios {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo check that higher-entropy samples get larger rescaling.
    Proposition {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid census of the target-gradient flip region.
    Flipmap {
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> CliResult<RunManifest> {
    match cli.command {
        Command::Train(a) => commands::cmd_train(&a.config, &a.overrides(), a.out.as_deref()),
        Command::Ablation(a) => commands::cmd_ablation(&a.config, &a.overrides(), a.out.as_deref()),
        Command::Gradlab(g) => match g {
            Gradlab::Ratios {
                draws,
                classes,
                alpha,
                seed,
                out,
            } => commands::cmd_ratios(draws, classes, alpha, seed, out.as_deref()),
            Gradlab::Proposition {
                trials,
                classes,
                seed,
                out,
            } => commands::cmd_proposition(trials, classes, seed, out.as_deref()),
            Gradlab::Flipmap { grid, alpha, out } => commands::cmd_flipmap(grid, alpha, out.as_deref()),
        },
        Command::Calibrate { pairs, bins, out } => commands::cmd_calibrate(&pairs, bins, out.as_deref()),
    }
}

/// Parses `args` (program name first), runs the command, prints a summary
/// and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    match run(cli) {
        Ok(m) => {
            print_summary(&m);
            exit::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_summary(m: &RunManifest) {
    println!("{} -> {}", m.command, m.output_dir.display());
    if let Some(seed) = m.seed {
        println!("seed={seed}");
    }
    for (k, v) in &m.summary {
        match v {
            toml::Value::Table(t) => {
                let fields: Vec<String> = t.iter().map(|(k2, v2)| format!("{k2}={v2}")).collect();
                println!("{k}: {}", fields.join(" "));
            }
            other => println!("{k}={other}"),
        }
    }
    println!("manifest={}", m.path().display());
}
