//! Command-line surface. Every flag can also be set from the `--config`
//! file under the same name (dashes or underscores).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "tlaw", version, about = "Fit, validate and plan with transfer scaling laws")]
pub struct Cli {
    /// TOML or JSON file whose keys mirror flag names; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output document format.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,

    /// Write the document here instead of stdout.
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,

    /// Also write the full JSON report to this path.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Fit a law form to each dataset in the input files
    Fit(FitArgs),
    /// Cross-validate candidate forms on each dataset
    Cv(CvArgs),
    /// Bootstrap standard errors and confidence intervals
    Bootstrap(BootstrapArgs),
    /// Budget allocation, sweeps, iso-loss curves and compute estimates
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Generate a synthetic experiment grid as ingest CSV
    Synth(SynthArgs),
    /// Merge JSON reports and render them
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Run-record files (CSV, or JSON with a `.json` extension).
    #[arg(required = true)]
    pub data: Vec<PathBuf>,

    /// Only use records of this dataset.
    #[arg(long)]
    pub dataset: Option<String>,

    /// Pre-training tokens per optimizer step, used to convert tokens to steps.
    #[arg(long, default_value_t = transfer_law::ingest::DEFAULT_TOKENS_PER_STEP)]
    pub tokens_per_step: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitFlags {
    /// Huber threshold on log residuals.
    #[arg(long, default_value_t = 1e-3)]
    pub huber_delta: f64,

    /// BFGS iteration cap per start.
    #[arg(long, default_value_t = 2000)]
    pub max_iterations: usize,

    /// Gradient-norm convergence threshold.
    #[arg(long, default_value_t = 1e-9)]
    pub convergence_tol: f64,

    /// Penalty weight on alpha^2 + beta^2.
    #[arg(long, default_value_t = 0.0)]
    pub reg_exponents: f64,

    /// Penalty weight on log(A)^2 + log(G)^2.
    #[arg(long, default_value_t = 0.0)]
    pub reg_coefficients: f64,

    /// Use the small 72-start grid instead of the full 2240-start grid.
    #[arg(long)]
    pub coarse_starts: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionArg {
    Sample,
    Population,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Law form (1-5).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub form: u8,

    #[command(flatten)]
    pub fit: FitFlags,

    /// Standard-deviation estimator for the cross-dataset variation row.
    #[arg(long, value_enum, default_value_t = DispersionArg::Sample)]
    pub dispersion: DispersionArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub form: u8,

    #[command(flatten)]
    pub fit: FitFlags,

    /// Number of resamples.
    #[arg(long, default_value_t = transfer_law::uncertainty::DEFAULT_RESAMPLES)]
    pub resamples: usize,

    /// Confidence level of the percentile intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,

    /// Grid starts nearest the full-data optimum added to each refit.
    #[arg(long, default_value_t = 4)]
    pub nearest_starts: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Forms to compare.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u8, 2, 3, 4, 5])]
    pub forms: Vec<u8>,

    /// Pre-training cut values in tokens (default: observed levels).
    #[arg(long, value_delimiter = ',')]
    pub p_thresholds: Vec<f64>,

    /// Fine-tuning cut values in tokens (default: observed levels).
    #[arg(long, value_delimiter = ',')]
    pub f_thresholds: Vec<f64>,

    /// Evaluate every n-th threshold pair.
    #[arg(long, default_value_t = 1)]
    pub skip: usize,

    /// Exponent-penalty weights.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.01, 0.1, 1.0, 5.0, 10.0, 50.0])]
    pub lambda_exp: Vec<f64>,

    /// Coefficient-penalty weights.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1e-4, 1e-3, 0.01, 0.1])]
    pub lambda_coef: Vec<f64>,

    /// Minimum training-block size (the form's parameter count always applies).
    #[arg(long, default_value_t = 0)]
    pub min_train: usize,

    /// Minimum test-set size.
    #[arg(long, default_value_t = 1)]
    pub min_test: usize,

    /// Random restarts after the grid multi-start.
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,

    /// Standard deviation of restart perturbations.
    #[arg(long, default_value_t = 0.5)]
    pub perturbation: f64,

    /// Use the full 2240-start grid for every training fit.
    #[arg(long)]
    pub full_starts: bool,

    #[arg(long, default_value_t = 1e-3)]
    pub huber_delta: f64,

    #[arg(long, default_value_t = 2000)]
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ParamsArgs {
    /// Named reference parameter set.
    #[arg(long, default_value = "fictional-encyclopedia", conflicts_with = "params")]
    pub preset: String,

    /// Parameters from a JSON report (first fitted dataset, or `--params-dataset`)
    /// or a JSON object with keys A, G, alpha, beta, E.
    #[arg(long)]
    pub params: Option<PathBuf>,

    /// Dataset to take from a report given with `--params`.
    #[arg(long)]
    pub params_dataset: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProblemArgs {
    #[command(flatten)]
    pub params: ParamsArgs,

    /// Total budget in dollars.
    #[arg(long, default_value_t = 1e6)]
    pub budget: f64,

    /// Dollars per pre-training step.
    #[arg(long, default_value_t = 1.0)]
    pub cp: f64,

    /// Dollars per fine-tuning data point.
    #[arg(long, default_value_t = 1.0)]
    pub cf: f64,

    /// Law units of p per pre-training step.
    #[arg(long, default_value_t = 1.0)]
    pub p_units_per_step: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,

    #[arg(long, default_value_t = 0.1)]
    pub from: f64,

    #[arg(long, default_value_t = 10.0)]
    pub to: f64,

    /// Log-spaced sweep points.
    #[arg(long, default_value_t = 50)]
    pub points: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IsoLossArgs {
    #[command(flatten)]
    pub params: ParamsArgs,

    /// Target losses.
    #[arg(long, value_delimiter = ',', required = true)]
    pub target: Vec<f64>,

    #[arg(long, default_value_t = 1.0)]
    pub p_min: f64,

    #[arg(long, default_value_t = 143_001.0)]
    pub p_max: f64,

    #[arg(long, default_value_t = 100)]
    pub points: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ComputeArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Model parameter count.
    #[arg(long, default_value_t = 2.8e9)]
    pub n_params: f64,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanCommand {
    /// Optimal split of one budget
    Allocate(ProblemArgs),
    /// Fine-tuning share as the transfer gap G varies
    SweepGap(SweepArgs),
    /// Allocation as the cost ratio C_f / C_p varies
    SweepCost(SweepArgs),
    /// Curves of constant predicted loss
    Isoloss(IsoLossArgs),
    /// Training compute estimate from per-run epochs
    Compute(ComputeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Named reference parameter set.
    #[arg(long, default_value = "fictional-encyclopedia")]
    pub preset: String,

    /// Law form used to generate losses.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub form: u8,

    /// Standard deviation of the noise on log-loss.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,

    /// Constant epochs column.
    #[arg(long)]
    pub epochs: Option<u32>,

    #[arg(long, default_value_t = transfer_law::ingest::DEFAULT_TOKENS_PER_STEP)]
    pub tokens_per_step: f64,

    /// Dataset name written to every record (default: the preset name).
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// JSON reports to merge, in order.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,

    #[arg(long, value_enum, default_value_t = DispersionArg::Sample)]
    pub dispersion: DispersionArg,
}
