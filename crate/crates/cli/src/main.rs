//! `wnsf`: simulate data, identify Box-Jenkins models, run Monte Carlo
//! campaigns and evaluate asymptotic covariance bounds.

mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wnsf::arx::DEFAULT_DELTA_REG;
use wnsf::ModelOrders;

use commands::{CliError, IdentifyArgs};

#[derive(Parser)]
#[command(name = "wnsf", version, about = "Weighted null-space fitting for Box-Jenkins models")]
#[command(after_help = "Exit codes: 0 ok, 1 I/O, 2 bad config or input, 3 infeasible simulation, \
4 identification failed, 5 non-informative experiment. Set WNSF_LOG=info|debug for logging.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one data set and write it as CSV (`t,r,u,y`).
    Simulate {
        /// Experiment config (JSON).
        #[arg(long, short)]
        config: PathBuf,
        /// Output CSV; defaults to `output.dataset` of the config.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Overrides `experiment.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the realized noise as column `e`.
        #[arg(long)]
        with_noise: bool,
    },
    /// Estimate a model from a CSV data set; prints the estimate as JSON.
    Identify {
        /// CSV with columns r, u, y.
        #[arg(long, short)]
        data: PathBuf,
        /// Model orders `m_f,m_l,m_c,m_d`.
        #[arg(long, value_parser = args::parse_orders)]
        orders: ModelOrders,
        /// ARX orders: `start:stop:step` or a comma list; default grid when absent.
        #[arg(long, value_parser = args::parse_grid)]
        n_grid: Option<args::Grid>,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        /// Normalized parameter-change tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Assume zero data before t = 1 in the ARX sums.
        #[arg(long)]
        known_zero_ic: bool,
        /// Skip the noise model (output-error variant).
        #[arg(long)]
        no_noise_model: bool,
        #[arg(long, default_value_t = DEFAULT_DELTA_REG)]
        delta_reg: f64,
        /// Write the JSON here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo campaign; writes runs.csv, fit.csv, summary.json, config.json.
    Montecarlo {
        #[arg(long, short)]
        config: PathBuf,
        /// Overrides `experiment.runs`.
        #[arg(long)]
        runs: Option<usize>,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Defaults to `output.dir` of the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Asymptotic covariance bounds for the configured experiment, as JSON.
    Crb {
        #[arg(long, short)]
        config: PathBuf,
        /// Quadrature points on [0, 2 pi).
        #[arg(long)]
        grid_size: Option<usize>,
        /// Seed selecting the system when it is drawn at random.
        #[arg(long)]
        seed: Option<u64>,
        /// Also report the finite-order limit matrix at this ARX order.
        #[arg(long)]
        mbar_order: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            with_noise,
        } => commands::simulate_cmd(&config, out, seed, with_noise),
        Command::Identify {
            data,
            orders,
            n_grid,
            max_iter,
            tol,
            known_zero_ic,
            no_noise_model,
            delta_reg,
            out,
        } => commands::identify_cmd(IdentifyArgs {
            data,
            orders,
            n_grid: n_grid.map(|g| g.0).unwrap_or_default(),
            max_iter,
            tol,
            known_zero_ic,
            no_noise_model,
            delta_reg,
            out,
        }),
        Command::Montecarlo {
            config,
            runs,
            jobs,
            out_dir,
        } => commands::montecarlo_cmd(&config, runs, jobs, out_dir),
        Command::Crb {
            config,
            grid_size,
            seed,
            mbar_order,
            out,
        } => commands::crb_cmd(&config, grid_size, seed, mbar_order, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WNSF_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
