use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use killdiff_core::experiment::{
    cmd_eval, cmd_forward, cmd_mcmc, cmd_particles, cmd_study_concentration, cmd_study_contraction,
    cmd_study_stability, cmd_synth,
};
use killdiff_core::{ExperimentConfig, Result, StudyReport};

/// Simulate killed reflected diffusions and infer the diffusivity from
/// binned binding counts.
#[derive(Debug, Parser)]
#[command(name = "killdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML), or `preset:<desk|paper|constant>`.
    config: String,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the forward PDE for the configured truth.
    Forward(Common),
    /// Simulate particles and compare bin counts with the PDE intensities.
    Particles {
        #[command(flatten)]
        common: Common,
        /// Override the number of simulated particles.
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Draw Poisson bin counts from the truth.
    Synth(Common),
    /// Sample the posterior with pCN.
    Mcmc(Common),
    /// Evaluate a posterior mean against the truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding the `mcmc` outputs (defaults to the output directory).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Recovery error against the sample scale n.
    StudyContraction(Common),
    /// Deviation of the histogram estimator from uniform intensities.
    StudyConcentration(Common),
    /// Inverse-continuity ratios for random diffusivity pairs.
    StudyStability(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match common.config.strip_prefix("preset:") {
        Some(name) => ExperimentConfig::preset(name)?,
        None => ExperimentConfig::load(Path::new(&common.config))?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<StudyReport> {
    match cli.command {
        Command::Forward(c) => cmd_forward(&load(&c)?, &c.out_dir),
        Command::Particles { common, particles } => {
            let mut cfg = load(&common)?;
            if let Some(p) = particles {
                cfg.particles.count = p;
            }
            cmd_particles(&cfg, &common.out_dir)
        }
        Command::Synth(c) => cmd_synth(&load(&c)?, &c.out_dir),
        Command::Mcmc(c) => cmd_mcmc(&load(&c)?, &c.out_dir),
        Command::Eval { common, run_dir } => {
            let run_dir = run_dir.unwrap_or_else(|| common.out_dir.clone());
            cmd_eval(&load(&common)?, &run_dir, &common.out_dir)
        }
        Command::StudyContraction(c) => cmd_study_contraction(&load(&c)?, &c.out_dir),
        Command::StudyConcentration(c) => cmd_study_concentration(&load(&c)?, &c.out_dir),
        Command::StudyStability(c) => cmd_study_stability(&load(&c)?, &c.out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
