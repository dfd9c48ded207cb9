//! Command-line arguments, config-file loading and the merge between them.
//!
//! Every option is optional at the clap level so an unset flag can fall back
//! to the config file; the documented default applies when neither sets it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "amcfg",
    version,
    about = "Anchored multi-modal clustering and popularity regression"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log filter, e.g. `info` or `amcfg=debug` [default: warn]
    #[arg(long, global = true)]
    pub log: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset with topic drift
    Synth(SynthArgs),
    /// Fit and evaluate the pipeline, writing report.json and predictions.csv
    Run(RunArgs),
    /// Run an ablation ladder (from a file or a preset)
    Ablate(AblateArgs),
    /// Run the pipeline once per k
    SweepK(SweepArgs),
    /// Write a 2-D projection CSV of each modality's clustering
    Viz(VizArgs),
    /// Print or write feature importance of a saved model
    Importance(ImportanceArgs),
    /// Fit clusters and anchor tables on a whole dataset and save them
    AnchorsBuild(AnchorsArgs),
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

pub fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T, UsageError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// TOML or JSON file with any of these options; flags take precedence
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of users [default: 50]
    #[arg(long)]
    pub n_users: Option<usize>,
    /// Training posts per user [default: 20]
    #[arg(long)]
    pub posts_per_user: Option<usize>,
    /// Test posts per user [default: 10]
    #[arg(long)]
    pub test_posts_per_user: Option<usize>,
    /// Latent topics [default: 20]
    #[arg(long)]
    pub n_topics: Option<usize>,
    /// Text embedding width [default: 64]
    #[arg(long)]
    pub text_dim: Option<usize>,
    /// Video embedding width [default: 32]
    #[arg(long)]
    pub video_dim: Option<usize>,
    /// Audio embedding width [default: 32]
    #[arg(long)]
    pub audio_dim: Option<usize>,
    /// Per-post popularity noise std [default: 0.3]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-dimension embedding noise std [default: 1.0]
    #[arg(long)]
    pub embed_noise: Option<f64>,
    /// Test-period drift, in [0, 1] [default: 0.4]
    #[arg(long)]
    pub drift: Option<f64>,
    /// Random seed [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn resolve(mut self) -> Result<Self, UsageError> {
        if let Some(path) = self.config.clone() {
            let file: SynthArgs = load_config_file(&path)?;
            merge_fields!(self, file; out, n_users, posts_per_user, test_posts_per_user, n_topics,
                text_dim, video_dim, audio_dim, noise, embed_noise, drift, seed);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackend {
    /// Deterministic offline responses
    Stub,
    /// OpenAI-compatible chat-completions endpoint
    Http,
}

#[derive(Debug, Clone, Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineArgs {
    /// TOML or JSON file with any of these options; flags take precedence
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (training data when --test-manifest is given)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Later-period test manifest: folds then train on other users' earlier posts and test on
    /// their own later posts (`--folds 1` gives a plain train/test split)
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Comma-separated feature groups: orig, cluster_id, stat, gen [default: orig,cluster_id,stat,gen]
    #[arg(long)]
    pub features: Option<String>,
    /// Comma-separated modalities [default: every modality in the manifest]
    #[arg(long)]
    pub modalities: Option<String>,
    /// Clusters per modality [default: 300]
    #[arg(long)]
    pub k: Option<usize>,
    /// SVD rank for text embeddings [default: 128]
    #[arg(long)]
    pub svd_rank: Option<usize>,
    /// Group k-fold folds; 1 with --test-manifest for a plain split [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed for folds and clustering [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// GBDT learning rate [default: 0.05]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// GBDT leaves per tree [default: 31]
    #[arg(long)]
    pub num_leaves: Option<usize>,
    /// GBDT boosting rounds [default: 500]
    #[arg(long)]
    pub n_rounds: Option<usize>,
    /// GBDT minimum rows per leaf [default: 20]
    #[arg(long)]
    pub min_samples_leaf: Option<usize>,
    /// GBDT histogram bins per feature [default: 255]
    #[arg(long)]
    pub max_bins: Option<usize>,
    /// LLM backend for semantic anchors [default: stub]
    #[arg(long, value_enum)]
    pub llm: Option<LlmBackend>,
    /// Chat-completions URL for --llm http [default: http://localhost:8000/v1/chat/completions]
    #[arg(long)]
    pub llm_endpoint: Option<String>,
    /// Model name for --llm http [default: gpt-4o]
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Directory for cached LLM responses [default: no cache]
    #[arg(long)]
    pub llm_cache: Option<PathBuf>,
    /// Request timeout in seconds [default: 60]
    #[arg(long)]
    pub llm_timeout: Option<u64>,
    /// Retries per request [default: 2]
    #[arg(long)]
    pub llm_retries: Option<u32>,
    /// Answer from the stub when the endpoint keeps failing [default: false]
    #[arg(long)]
    pub llm_fallback: Option<bool>,
    /// Maximum concurrent LLM requests [default: 4]
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Comma-separated prompt tasks: theme, category, audience, mbti, summary [default: theme,mbti,summary]
    #[arg(long)]
    pub tasks: Option<String>,
    /// Width of the hashing text embedder [default: 384]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Output directory [default: out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PipelineArgs {
    pub fn resolve(mut self) -> Result<Self, UsageError> {
        if let Some(path) = self.config.clone() {
            let file: PipelineArgs = load_config_file(&path)?;
            merge_fields!(self, file; manifest, test_manifest, features, modalities, k, svd_rank, folds, seed,
                learning_rate, num_leaves, n_rounds, min_samples_leaf, max_bins, llm, llm_endpoint, llm_model,
                llm_cache, llm_timeout, llm_retries, llm_fallback, max_in_flight, tasks, embed_dim, out);
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Four CSVs: k sweep, modality ladder, anchor-feature ladder, semantic ladder
    PaperTables,
    /// user; +text; +video; +audio
    Modalities,
    /// orig; +cluster_id; +stat
    Features,
    /// stat; +gen
    Semantic,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Ladder file (TOML or JSON) with a `steps` list of {label, features, modalities, k}
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub ladder: Option<PathBuf>,
    /// Built-in ladder
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// k values for the paper-tables sweep [default: 100,200,300,400,500]
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Comma-separated k values [default: 100,200,300,400,500]
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImportanceKindArg {
    Gain,
    Splits,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    /// Saved model JSON (e.g. model_fold0.json from `run`)
    #[arg(long)]
    pub model: PathBuf,
    /// Importance measure [default: gain]
    #[arg(long, value_enum)]
    pub kind: Option<ImportanceKindArg>,
    /// Output CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Also query the LLM and save the semantic anchor table
    #[arg(long)]
    pub semantic: bool,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LadderFile {
    pub steps: Vec<LadderFileStep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderFileStep {
    pub label: String,
    pub features: Option<String>,
    pub modalities: Option<String>,
    pub k: Option<usize>,
}
