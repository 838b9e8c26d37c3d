//! `fpt-perturb`: simulate ensembles, estimate survival and relaxation, measure
//! residual times and predict the effect of periodic perturbations.

mod commands;
mod config;
mod failure;
mod rundir;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Grid, Window};
use failure::{Failure, Outcome};

#[derive(Parser, Debug)]
#[command(name = "fpt-perturb", version, about, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON). For `oracle`, the chain description.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; also where later stages look for earlier artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory holding input artifacts, when different from --out.
    #[arg(long, global = true, value_name = "DIR")]
    input: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Draw the master seed from OS entropy when none is configured.
    #[arg(long, global = true)]
    seed_from_entropy: bool,
    #[arg(long, global = true, value_name = "N")]
    p_star: Option<usize>,
    /// Perturbation intervals, `a:b` or `a:b:step`.
    #[arg(long, global = true, value_name = "a:b:step")]
    p_grid: Option<Grid>,
    /// KS significance level (default 0.05).
    #[arg(long, global = true, value_name = "F")]
    alpha: Option<f64>,
    /// Reference window for relaxation detection.
    #[arg(long, global = true, value_name = "t1:t2")]
    window: Option<Window>,
    /// Predict stochastic resetting from the survival curve alone.
    #[arg(long, global = true)]
    sr: bool,
    /// Residual-time table for `predict` (default: tau.csv in the input directory).
    #[arg(long, global = true, value_name = "PATH")]
    tau: Option<PathBuf>,
    /// Perturbation to use, by label (e.g. `full_sr`, `shrink_perturb(0.4,0.1)`).
    #[arg(long, global = true, value_name = "NAME")]
    perturbation: Option<String>,
    /// Comma-separated quantiles for `stats` (default 0.1,0.9).
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    quantiles: Option<Vec<f64>>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "FPT_PERTURB_THREADS", value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate an ensemble: manifest.json + trajectories.jsonl.
    Simulate,
    /// Survival curve of an ensemble: survival.csv.
    Survival,
    /// Per-epoch comparison with the window-averaged CDF: qss.csv; prints t_r.
    Qss,
    /// Mean residual time after one perturbation at P*, per candidate: tau.csv.
    MeasureTau,
    /// Predicted mean first-passage time versus P: prediction.csv.
    Predict,
    /// Brute-force mean first-passage time under perturbation every P: validate.csv.
    Validate,
    /// Conditional mean and quantiles of the collective variable: trajstats.csv.
    Stats,
    /// Exact results for a finite Markov chain: oracle.csv.
    Oracle,
}

fn configure_threads(n: Option<usize>) -> Outcome {
    match n {
        None => Ok(()),
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn run(cli: &Cli) -> Outcome {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate => commands::simulate(cli),
        Command::Survival => commands::survival(cli),
        Command::Qss => commands::qss(cli),
        Command::MeasureTau => commands::measure_tau(cli),
        Command::Predict => commands::predict(cli),
        Command::Validate => commands::validate(cli),
        Command::Stats => commands::stats(cli),
        Command::Oracle => commands::oracle(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fpt-perturb: {f}");
            ExitCode::from(f.code())
        }
    }
}
