use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use encourage::experiment::{exit_code, run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "encourage", version, about = "Fairness-constrained encouragement policies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a dataset from the configured design.
    Simulate(Common),
    /// Fit and save the cross-fitted nuisance bundle.
    Fit(Common),
    /// Trade-off curve of threshold rules, plus the solution at `constraint.eps`.
    ThresholdSweep(Common),
    /// Saddle-point solver for general linear constraints.
    Redfair(Common),
    /// Split-sample refinement of the saddle-point solver.
    TwoStage(Common),
    /// Value bounds without recommendation overlap.
    RobustBounds(Common),
    /// DM, IPW, DR and control-variate values of one policy.
    CompareEstimators(Common),
    /// Range of achievable take-up disparities.
    FeasibleRange(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Fit(c) => (Command::Fit, c),
        Cmd::ThresholdSweep(c) => (Command::ThresholdSweep, c),
        Cmd::Redfair(c) => (Command::Redfair, c),
        Cmd::TwoStage(c) => (Command::TwoStage, c),
        Cmd::RobustBounds(c) => (Command::RobustBounds, c),
        Cmd::CompareEstimators(c) => (Command::CompareEstimators, c),
        Cmd::FeasibleRange(c) => (Command::FeasibleRange, c),
    };
    if let Some(t) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = ExperimentConfig::load(&common.config).and_then(|mut cfg| {
        if let Some(s) = common.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = common.out {
            cfg.out = o;
        }
        run(&cfg, command)
    });
    match result {
        Ok(m) => {
            print!("{}", m.to_text());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
