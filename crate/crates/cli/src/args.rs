use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be finite and >= 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be finite and > 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        Ok(v) => Err(format!("must lie in (0, 1], got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be finite, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "more", version, about = "Mixture of regression experts toolkit")]
pub struct Cli {
    /// Worker threads; 1 runs everything serially. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_parser = positive)]
    pub threads: usize,

    /// JSON object of flag values (keys as long flag names); explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a dataset from a random mixture of experts
    Synth(SynthArgs),
    /// Train a mixture model with EM
    Fit(FitArgs),
    /// Predict targets with a saved model
    Predict(PredictArgs),
    /// Compare predictions with MAE, R² and μ+kσ classification reports
    Evaluate(EvaluateArgs),
    /// Choose the number of experts by BIC
    SelectK(SelectKArgs),
    /// K-fold cross-validation of a mixture configuration
    Crossval(CrossvalArgs),
    /// Fit the global ridge regression baseline
    BaselineRidge(RidgeArgs),
    /// Assign samples to experts and rank important output regions
    Analyze(AnalyzeArgs),
    /// k-means clustering of rows of a matrix
    Cluster(ClusterArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub experts: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub in_dim: usize,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub out_dim: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative_f64)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 1.0, value_parser = finite)]
    pub gating_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200, value_parser = positive)]
    pub max_iters: usize,
    /// Relative log-likelihood change that counts as convergence; 0 runs every iteration
    #[arg(long, default_value_t = 1e-10, value_parser = non_negative_f64)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub eta: f64,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub gating_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// kmeans or random
    #[arg(long, default_value = "kmeans", value_parser = ["kmeans", "random"])]
    pub init: String,
    #[arg(long, default_value_t = 1e-6, value_parser = positive_f64)]
    pub variance_floor: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Inputs (N×n), .bin or CSV
    #[arg(long)]
    pub x: PathBuf,
    /// Targets (N×m), .bin or CSV
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub experts: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output model file (.json)
    #[arg(long)]
    pub model: PathBuf,
    /// Store matrices in sibling .bin files instead of embedding them
    #[arg(long)]
    pub sibling_matrices: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    /// Predictions (N×m); .bin or CSV by extension
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Ground-truth targets
    #[arg(long)]
    pub y_true: PathBuf,
    /// NAME=FILE prediction matrix; repeat to compare methods
    #[arg(long = "pred", required = true, value_name = "NAME=FILE")]
    pub preds: Vec<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectKArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub k_min: usize,
    #[arg(long, default_value_t = 6, value_parser = positive)]
    pub k_max: usize,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub restarts: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    pub experts: usize,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub folds: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RidgeArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// Penalty; repeat (or pass a comma list) to pick the best by K-fold MAE
    #[arg(long, default_value = "1.0", value_delimiter = ',', value_parser = non_negative_f64)]
    pub lambda: Vec<f64>,
    /// Folds used when several lambdas are given
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    /// Targets; required for region importance and responsibility mode
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// dim_index,region_label CSV; omit to only assign samples
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long, default_value = "gate", value_parser = ["gate", "responsibility"])]
    pub mode: String,
    #[arg(long, default_value_t = 0.85, value_parser = fraction)]
    pub variance_target: f64,
    #[arg(long, default_value_t = 0.2, value_parser = finite)]
    pub score_threshold: f64,
    #[arg(long, default_value = "mean", value_parser = ["mean", "sum"])]
    pub aggregation: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    /// Rows to cluster (embeddings or activations)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value = "cosine", value_parser = ["cosine", "euclidean"])]
    pub metric: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300, value_parser = positive)]
    pub max_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}
