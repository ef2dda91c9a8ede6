mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use aggflex::{Error, Norm, Representation, Variant};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "aggflex", version, about = "Multi-battery approximations of aggregate EV flexibility")]
pub struct Cli {
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    /// TOML file with `[solver]` and `[experiment]` tables.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a random scenario.
    Generate {
        #[arg(long, short = 'n')]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of periods; defaults to the configured ranges.
        #[arg(long)]
        periods: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Cluster the EV right-hand sides with k-means.
    Cluster {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        kmeans: KmeansArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fit a multi-battery model and write it as JSON.
    Approximate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        kmeans: KmeansArgs,
        /// Include the certificates `Lambda` in the model file.
        #[arg(long)]
        with_certificates: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Minimize the aggregate peak over the exact set or a model.
    PeakShave {
        #[arg(long, requires = "scenario", conflicts_with = "model")]
        exact: bool,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, required_unless_present = "exact")]
        model: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a batch of trials and write results.csv.
    Gap {
        /// Inclusive range such as `1..4`.
        #[arg(long, value_name = "A..B")]
        k_range: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, short = 'n')]
        n: Option<usize>,
        #[arg(long)]
        periods: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        norm: Option<Norm>,
        #[arg(long)]
        representation: Option<Representation>,
        /// Fill the timing columns (breaks byte-identical reruns).
        #[arg(long)]
        timings: bool,
        /// Also write the per-K quartile table here.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Split an aggregate power profile into per-EV profiles.
    Disaggregate {
        #[arg(long)]
        model: PathBuf,
        /// JSON array of per-period power in kW.
        #[arg(long)]
        profile: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Audit a model file and check sampled disaggregations.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Write SVG figures and their data.
    Plot {
        #[command(subcommand)]
        figure: PlotCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum PlotCommand {
    /// Box plot of gap versus K from a results.csv.
    Gap {
        #[arg(long)]
        results: PathBuf,
        /// Box-plot statistics as CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Stacked per-EV profiles of a disaggregated aggregate.
    Profiles {
        #[arg(long)]
        model: PathBuf,
        /// Aggregate to split; defaults to the model's peak-shaving optimum.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Per-EV profiles as CSV (one row per EV).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "l2")]
    pub norm: Norm,
    #[arg(long, default_value = "joint")]
    pub variant: Variant,
    #[arg(long, default_value = "energy")]
    pub representation: Representation,
}

#[derive(Args, Debug, Clone)]
pub struct KmeansArgs {
    /// Seed of the k-means restarts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = aggflex::clustering::DEFAULT_RESTARTS)]
    pub restarts: usize,
    #[arg(long, default_value_t = aggflex::clustering::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::DimensionTooLarge(_) => "dimension_too_large",
        Error::Infeasible => "infeasible",
        Error::Unbounded => "unbounded",
        Error::EmptyInputSet => "empty_input_set",
        Error::InfeasibleSpec(_) => "infeasible_spec",
        Error::Index(_) => "index",
        Error::Config(_) => "config",
        Error::Model(_) => "model",
        Error::BackendUnsupported(_) => "backend_unsupported",
        Error::Solver(_) => "solver",
        Error::Internal(_) => "internal",
        Error::PreconditionViolation(_) => "precondition_violation",
        Error::DegenerateBaseline(_) => "degenerate_baseline",
        Error::Unsupported(_) => "unsupported",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn report(json: bool, kind: &str, message: &str, code: u8) -> ExitCode {
    if json {
        let v = serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let json_requested = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_requested {
                return report(true, "usage", e.to_string().trim(), 1);
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_solver_failure() { 2 } else { 1 };
            report(cli.json, kind(&e), &e.to_string(), code)
        }
    }
}
