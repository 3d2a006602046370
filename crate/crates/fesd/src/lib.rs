//! Command-line front end for `fesd-core`: catalog and JSON model loading,
//! the `simulate`, `bench-order`, `ocp`, `report-complexity` and `validate`
//! commands, and their CSV/JSON artifacts.

pub mod commands;
pub mod model_json;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;

/// Failure classes; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(_) => 2,
            CliError::Config(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<fesd_core::Error> for CliError {
    fn from(e: fesd_core::Error) -> Self {
        use fesd_core::Error as E;
        match e {
            E::Solver(_) | E::NanProduced { .. } | E::Fit(_) => CliError::Solver(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fesd", version, about = "Simulate and control Filippov systems with switch-detecting finite elements")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate a model and write its trajectory and switches.
    Simulate(SimulateArgs),
    /// Convergence study over schemes and step counts.
    BenchOrder(BenchArgs),
    /// Solve an optimal control problem.
    Ocp(OcpArgs),
    /// Problem-size counts of the step and Stewart representations.
    ReportComplexity(ComplexityArgs),
    /// Check a model and optionally dump it as JSON.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    RadauIia,
    GaussLegendre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Norm {
    Terminal,
    Max,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Catalog id or path to a model JSON file.
    #[arg(long)]
    pub model: String,
    /// step, stewart or step-lifted-<depth>.
    #[arg(long, default_value = "step")]
    pub variant: String,
    #[arg(long, value_enum, default_value = "radau-iia")]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 2)]
    pub nfe: usize,
    /// Simulation horizon (defaults to the model's).
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Initial state, comma separated (defaults to the model's).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1)]
    pub nsim: usize,
    /// Use uniform fixed elements instead of switch detection.
    #[arg(long)]
    pub fixed_grid: bool,
    /// Piecewise-constant controls, one CSV row per step.
    #[arg(long)]
    pub controls: Option<PathBuf>,
    /// Also report the terminal state sensitivity to the initial state.
    #[arg(long)]
    pub sensitivity: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
    pub nsim: Vec<usize>,
    /// Nominal orders to test; odd orders are Radau IIA, even ones Gauss-Legendre.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub orders: Vec<usize>,
    /// Reference step count as a multiple of the finest tested one.
    #[arg(long, default_value_t = 8)]
    pub reference_factor: usize,
    #[arg(long)]
    pub fixed_grid: bool,
    #[arg(long, value_enum, default_value = "terminal")]
    pub norm: Norm,
}

#[derive(Debug, Clone, Args)]
pub struct OcpArgs {
    /// `sliding` for the built-in toy problem or a path to an OCP JSON file.
    #[arg(long, default_value = "sliding")]
    pub model: String,
    #[arg(long, default_value_t = 4)]
    pub nctrl: usize,
    #[arg(long, default_value_t = 2)]
    pub nfe: usize,
    #[arg(long, default_value_t = 1)]
    pub stages: usize,
    /// Also run a brute-force search with this many levels per control (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub grid_levels: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ComplexityArgs {
    #[arg(long)]
    pub model: String,
    /// Lifting depth for the step representation.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Append formula rows for dense systems with 1..=N switching functions.
    #[arg(long, default_value_t = 6)]
    pub table_up_to: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: String,
    /// Writes model.json into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
