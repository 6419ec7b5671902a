//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "pasta",
    about = "Weakly supervised anomaly/target segmentation over patch-embedding corpora",
    version
)]
pub struct Cli {
    /// Worker threads for per-image and per-cell parallelism (falls back to
    /// the PASTA_THREADS environment variable, then to all cores). Never
    /// changes numerical output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus (features, masks, manifests).
    Synth(SynthArgs),
    /// Fit the cluster codebook on a mixed corpus (training phase 1).
    Fit(FitArgs),
    /// Derive the anomaly cluster set against a reference corpus and emit
    /// the model artifact (training phase 2).
    DefineAnomalies(DefineAnomaliesArgs),
    /// Patch-level anomaly masks, upsampled to image resolution.
    InferPatch(InferArgs),
    /// Tri-class masks via instance-mask fusion voting.
    InferFused(InferArgs),
    /// Hypersphere/feature-voting baseline.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Fit and score a K x seeds grid, emitting per-seed and aggregate CSV.
    Sweep(SweepArgs),
    /// Export the per-cluster distribution/ratio table as CSV.
    Hist(HistArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the corpus.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub grid_h: usize,
    #[arg(long, default_value_t = 16)]
    pub grid_w: usize,
    #[arg(long, default_value_t = 128)]
    pub image_h: usize,
    #[arg(long, default_value_t = 128)]
    pub image_w: usize,
    #[arg(long, default_value_t = 2)]
    pub background_components: usize,
    #[arg(long, default_value_t = 2)]
    pub target_components: usize,
    #[arg(long, default_value_t = 1)]
    pub anomaly_components: usize,
    /// Per-blob anomaly probability in anomaly-bearing corpora.
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Minimum pairwise component-mean distance; defaults to
    /// 10 * sigma * sqrt(dim).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub blobs_min: usize,
    #[arg(long, default_value_t = 6)]
    pub blobs_max: usize,
    #[arg(long, default_value_t = 2)]
    pub blob_min: usize,
    #[arg(long, default_value_t = 5)]
    pub blob_max: usize,
    #[arg(long, default_value_t = 100)]
    pub images_mixed: usize,
    #[arg(long, default_value_t = 100)]
    pub images_reference: usize,
    #[arg(long, default_value_t = 50)]
    pub images_test: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Mixed-corpus manifest.
    #[arg(long)]
    pub mixed: PathBuf,
    /// Output codebook artifact.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 65536)]
    pub init_sample_size: usize,
}

#[derive(Debug, Args)]
pub struct DefineAnomaliesArgs {
    /// Codebook artifact from `fit`.
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub mixed: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Output model artifact.
    #[arg(long)]
    pub out: PathBuf,
    /// Clusters with reference/mixed ratio strictly below this are anomalous.
    #[arg(long, default_value_t = 0.05)]
    pub r_threshold: f64,
    /// Mask-fusion voting threshold.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test manifest.
    #[arg(long)]
    pub test: PathBuf,
    /// Directory for predicted masks (and fusion reports in fused mode).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Build the target feature bag from a mixed corpus with instance masks.
    Fit(BaselineFitArgs),
    /// Classify test objects against a bag and emit tri-class masks.
    Infer(BaselineInferArgs),
    /// Score a kSphere x kVote grid, emitting CSV.
    Sweep(BaselineSweepArgs),
}

#[derive(Debug, Args)]
pub struct BaselineFitArgs {
    #[arg(long)]
    pub mixed: PathBuf,
    /// Output bag artifact.
    #[arg(long)]
    pub out: PathBuf,
    /// Hypersphere radius = distance to this nearest neighbor.
    #[arg(long, default_value_t = 260)]
    pub k_sphere: usize,
    /// Fraction of densest embeddings retained.
    #[arg(long, default_value_t = 0.9)]
    pub bag_fraction: f64,
}

#[derive(Debug, Args)]
pub struct BaselineInferArgs {
    #[arg(long)]
    pub bag: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Votes drawn from this many nearest bag entries.
    #[arg(long, default_value_t = 10)]
    pub k_vote: usize,
}

#[derive(Debug, Args)]
pub struct BaselineSweepArgs {
    #[arg(long)]
    pub mixed: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "260")]
    pub k_sphere: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub k_vote: Vec<usize>,
    #[arg(long, default_value_t = 0.9)]
    pub bag_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Patch,
    Fused,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks, named after each record's ground-truth
    /// mask basename.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Output CSV report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub mixed: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Output CSV (per-seed rows plus aggregate rows).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,15,20,25")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "fused")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.05)]
    pub r_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 65536)]
    pub init_sample_size: usize,
    /// Optional timing CSV (k,seed,mode,modelSetupSeconds,inferMsPerImage).
    /// Kept out of the default outputs because wall-clock values are not
    /// byte-reproducible.
    #[arg(long)]
    pub timing_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output CSV (clusterId,mixedProb,refProb,ratio,isAnomaly).
    #[arg(long)]
    pub out: PathBuf,
}
