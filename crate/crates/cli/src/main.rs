mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "reuse-bias-lab", version, about = "Reuse Bias experiments on tabular MDPs")]
pub struct Cli {
    /// JSON experiment config; defaults are used for absent fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `optim.learning_rate=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads; 0 or unset uses the available parallelism.
    #[arg(long, env = "REUSE_BIAS_LAB_JOBS", global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub master_seed: Option<u64>,
    /// Print the fully resolved config as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, serde::Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Reuse bias of the configured algorithm(s) at each configured buffer size.
    MeasureBias(MeasureArgs),
    /// Run a named verification; exits 1 if it fails.
    Verify(VerifyArgs),
    /// Evaluate the reuse-error bounds on given inputs.
    Bounds(BoundsArgs),
    /// Compare analytic gradients with central differences on random configurations.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct MeasureArgs {
    /// Comma-separated algorithm names; defaults to the config's `algorithm`.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    Thm1,
    Thm2,
    Thm3,
    #[value(name = "thm4-coverage")]
    Thm4Coverage,
    #[value(name = "appendix-c")]
    AppendixC,
    Stability,
    Biris,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct VerifyArgs {
    pub check: CheckName,
    /// Number of buffers (seeds); each check has its own default.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Buffer size(s), comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Hypothesis set size for thm1.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Learning rate for thm2.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Buffer size of the thm3 construction.
    #[arg(long, default_value_t = 2)]
    pub n: u64,
    /// Overestimate target for thm3.
    #[arg(long = "M", default_value_t = 1.0)]
    pub big_m: f64,
    /// Ceiling on the expected true return for thm3.
    #[arg(long, default_value_t = 0.5)]
    pub eps: f64,
    /// Bandit size for appendix-c.
    #[arg(long, default_value_t = 1000)]
    pub actions: usize,
    /// Largest allowed regularized/plain bias ratio for biris.
    #[arg(long, default_value_t = 0.6)]
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct BoundsArgs {
    #[arg(long)]
    pub eps1: Option<f64>,
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Buffer size.
    #[arg(long)]
    pub m: Option<usize>,
    /// Failure probability; defaults to the config's `delta`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Hypothesis set size for the finite-hypothesis bound.
    #[arg(long)]
    pub h_size: Option<usize>,
    /// Largest importance ratio for the finite-hypothesis bound.
    #[arg(long)]
    pub rho_max: Option<f64>,
    /// Per-step ratio deviation for the product-ratio bound.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct GradcheckArgs {
    /// Number of random configurations; defaults to `gradcheck.n_configs`.
    #[arg(long)]
    pub configs: Option<usize>,
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Ok,
    VerificationFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprint!("error: {c}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(2)
        }
    }
}
