use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "glass", version, about = "Forge grouped datasets, train two-tower models, evaluate per-level retrieval")]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace). Overridden by RUST_LOG.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a concept dag from a caption corpus.
    Forge(ForgeArgs),
    /// Generate a synthetic corpus with known hierarchy and forge it.
    Synth(SynthArgs),
    /// Train the two-tower model on a forged dataset.
    Train(TrainArgs),
    /// Align the text tower with group concepts before image-text training.
    PretrainText(TrainArgs),
    /// Per-level text-to-image R@1 of a checkpoint.
    Eval(EvalArgs),
    /// Per-level deltas and factor gains across evaluation reports.
    Compare(CompareArgs),
    /// Check analytic loss gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Summarize a dag, checkpoint or report.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// Lookup table loaded from --rules.
    Rules,
    /// Remote service at --provider-url.
    Http,
}

#[derive(Debug, Args)]
pub struct ForgeKnobs {
    /// Abstraction tiers above the leaves.
    #[arg(long)]
    pub l_max: Option<usize>,
    /// Smallest image group kept as is.
    #[arg(long)]
    pub size_min: Option<usize>,
    /// Concept cosine needed to merge a small group into a peer.
    #[arg(long)]
    pub sim_min: Option<f64>,
    /// Concept cosine above which two groups become hard negatives.
    #[arg(long)]
    pub hard_neg_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    /// Corpus in JSON lines (leaf_id, caption, image_features).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "rules")]
    pub provider: ProviderKind,
    /// Rule table for the rules provider (rules.json as written by synth).
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, env = "GLASS_PROVIDER_URL")]
    pub provider_url: Option<String>,
    #[arg(long, env = "GLASS_PROVIDER_KEY", hide_env_values = true)]
    pub provider_key: Option<String>,
    /// Retries per provider request after the first attempt.
    #[arg(long, default_value_t = 3)]
    pub provider_retries: usize,
    /// Provider response cache. Defaults to <out>/cache.
    #[arg(long, env = "GLASS_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: ForgeKnobs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML with roots, branching, leaves_per_group, feature_dim, noise and
    /// an optional [forge] table.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding dag.json (output of synth or forge).
    #[arg(long)]
    pub data: PathBuf,
    /// Preset the flags below override.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// pairwise, centroid or infonce.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub groups_per_batch: Option<usize>,
    #[arg(long)]
    pub pairs_per_group: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_inner: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Width of an optional tanh layer in each tower.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// Treat the centroids in the inner terms as constants.
    #[arg(long)]
    pub stop_gradient: bool,
    /// Start from the parameters of this checkpoint directory.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue this checkpoint directory up to --epochs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Defaults to the seed recorded by synth/forge in --data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory. Defaults to <data>/ckpt (ckpt-text for
    /// pretrain-text).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GalleryArg {
    Full,
    Restricted,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub gallery: GalleryArg,
    /// Defaults to the checkpoint directory name.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Extra factor for compare, as key=value. Repeatable.
    #[arg(long = "tag", value_parser = parse_tag)]
    pub tags: Vec<(String, String)>,
    /// Recorded in the report; evaluation itself draws no randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_tag(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// report.json files; the first is the baseline.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Loss name or `all`.
    #[arg(long, default_value = "all")]
    pub loss: String,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long)]
    pub tau_inner: Option<f64>,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long)]
    pub stop_gradient: bool,
    /// Where to write gradcheck.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// dag.json, a checkpoint directory or file, or report.json.
    pub path: PathBuf,
}
