//! `riskctl`: scenario generation, training, reference solves and studies.

mod artifact;
mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use failure::CliError;

#[derive(Parser, Debug)]
#[command(name = "riskctl", version, about = "Neural feedback policies for risk-reward decumulation")]
struct Cli {
    /// Worker threads (default: available cores). RISKCTL_THREADS takes
    /// precedence when set.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset of i.i.d. return paths.
    Simulate {
        /// Market parameters (JSON); calibrated values when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Number of intervention periods.
        #[arg(long = "M", default_value_t = 30)]
        periods: usize,
        /// Horizon in years; equal to the period count when omitted.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long = "K")]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one policy pair on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (JSON); the decumulation problem when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Writes the training trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Solve the mean-CVaR decumulation problem on a grid.
    Reference {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid level: nodes per axis.
        #[arg(long, default_value_t = 512)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated training over a capacity or sample-size sweep.
    Study {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        /// Sweep used when the configuration has no study section.
        #[arg(long, value_enum, default_value_t = SweepArg::Capacity)]
        sweep: SweepArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained policy on a dataset.
    Evaluate {
        /// Run record written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Writes the statistics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export withdrawal and allocation heat maps of a trained policy.
    Heatmap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        w_min: f64,
        #[arg(long, default_value_t = 2000.0)]
        w_max: f64,
        #[arg(long, default_value_t = 201)]
        w_nodes: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    Capacity,
    SampleSize,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    match std::env::var("RISKCTL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::config(format!("RISKCTL_THREADS={v} is not a positive integer"))
                    .at("RISKCTL_THREADS")
            }),
        Err(_) => Ok(flag),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(CliError::config("--threads must be >= 1").at("threads"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()).at("threads"))?;
    }
    match cli.command {
        Command::Simulate {
            params,
            periods,
            horizon,
            paths,
            seed,
            out,
        } => commands::simulate(params.as_deref(), periods, horizon, paths, seed, &out),
        Command::Train {
            data,
            config,
            out,
            trace,
            iterations,
        } => commands::train(&data, config.as_deref(), &out, trace.as_deref(), iterations),
        Command::Reference {
            params,
            config,
            grid,
            out,
        } => commands::reference(params.as_deref(), config.as_deref(), grid, &out),
        Command::Study {
            config,
            profile,
            sweep,
            out,
        } => commands::study(
            config.as_deref(),
            profile.map(|p| match p {
                ProfileArg::Desk => riskctl_core::experiments::Profile::Desk,
                ProfileArg::Full => riskctl_core::experiments::Profile::Full,
            }),
            matches!(sweep, SweepArg::SampleSize),
            &out,
        ),
        Command::Evaluate { run, data, out } => commands::evaluate(&run, &data, out.as_deref()),
        Command::Heatmap {
            run,
            out,
            w_min,
            w_max,
            w_nodes,
        } => commands::heatmap(&run, &out, w_min, w_max, w_nodes),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
