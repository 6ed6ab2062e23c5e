use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coordigraph::harness::{
    apply_overrides, check_equivariance, evaluate, grad_check, parse_config, plot, train, Checkpoint,
    HarnessError, RunConfig,
};

/// Subequivariant graph policies for planar chains, trained with PPO.
///
/// Any config key can be overridden after the subcommand as
/// `--section.key=value`; overrides win over the config file, which wins
/// over built-in defaults.
#[derive(Parser)]
#[command(name = "coordigraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics.csv plus checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll the deterministic policy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate on a chain with this many links instead.
        #[arg(long)]
        n_links: Option<usize>,
        /// Per-step CSV trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Group-action tests in three dimensions and through the planar pipeline.
    CheckEquivariance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
    },
    /// Compare PPO loss gradients with central differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write gnuplot data, a gnuplot script and a PNG from a metrics CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .and_then(|s| s.split_once('='))
        .is_some_and(|(k, _)| k.contains('.'))
}

fn load(config: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig, HarnessError> {
    let base = match config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(base, overrides)
}

fn run(cli: Cli, overrides: &[String]) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = load(config.as_ref(), overrides)?;
            let summary = train(&cfg, resume.as_deref())?;
            println!(
                "{} iterations, metrics in {}, final checkpoint {}",
                summary.rows.len(),
                summary.metrics_path.display(),
                summary.final_checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            n_links,
            trace,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let episodes = episodes.unwrap_or(ck.config.run.eval_episodes);
            let r = evaluate(&ck, episodes, seed, n_links, trace.as_deref())?;
            println!("mean_return {:.9e}", r.mean_return);
            println!("std_return {:.9e}", r.std_return);
        }
        Command::CheckEquivariance {
            config,
            trials,
            tolerance,
        } => {
            let cfg = load(config.as_ref(), overrides)?;
            let report = check_equivariance(&cfg, trials, tolerance)?;
            print!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::GradCheck { config, tolerance } => {
            let cfg = load(config.as_ref(), overrides)?;
            let report = grad_check(&cfg, tolerance)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Plot { metrics, out } => {
            for p in plot(&metrics, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let (overrides, args): (Vec<String>, Vec<String>) = std::env::args().partition(|a| is_override(a));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if !overrides.is_empty() && matches!(cli.command, Command::Eval { .. } | Command::Plot { .. }) {
        eprintln!("error: config overrides are not accepted by this subcommand");
        return ExitCode::from(1);
    }
    match run(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
