use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dior::{BackendOptions, ExtractionConfig, LayerSelector, PromptSpec, TokenStrategy};

#[derive(Debug, Parser)]
#[command(name = "dior", version, about = "Condition-focused image embeddings from vision-language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract conditional embeddings for every manifest item into a store.
    Embed(EmbedArgs),
    /// Build a baseline embedding store.
    Baseline(BaselineArgs),
    /// Score stores against a manifest and write one report line per condition.
    Evaluate(EvaluateArgs),
    /// Score every layer's last-input embedding and report the best layer.
    SweepLayers(SweepLayersArgs),
    /// Score each prompt variant of the built-in catalog.
    SweepPrompts(SweepPromptsArgs),
    /// Time multi-condition extraction with and without prefix reuse.
    BenchCache(BenchCacheArgs),
    /// Linear-probe or few-shot classification on stored embeddings.
    Probe(ProbeArgs),
    /// Render a t-SNE scatter of stored embeddings, colored by class.
    PlotTsne(PlotTsneArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Vision-language backend name.
    #[arg(long, default_value = "toy")]
    pub backend: String,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    /// Transformer layer count of the backend.
    #[arg(long, default_value_t = 4)]
    pub model_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// Image patches per image.
    #[arg(long, default_value_t = 4)]
    pub patches: usize,
    /// Wrap prompts in the backend's chat format.
    #[arg(long)]
    pub chat_template: bool,
    /// Expected model id; extraction fails if the backend reports another.
    #[arg(long)]
    pub model_id: Option<String>,
}

impl BackendArgs {
    pub fn options(&self, seed: u64) -> BackendOptions {
        BackendOptions {
            seed,
            hidden_dim: self.hidden_dim,
            layers: self.model_layers,
            vocab: self.vocab,
            patches: self.patches,
            chat_template: self.chat_template,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    /// Layer index or `final`.
    #[arg(long, default_value = "final")]
    pub layer: LayerSelector,
    #[arg(long, default_value = "last_input")]
    pub token_strategy: TokenStrategy,
    /// Prompt variant, e.g. `verb=describe,oneword=1,cond=1`.
    #[arg(long, default_value = "verb=describe,oneword=1,cond=1")]
    pub prompt_spec: PromptSpec,
    /// Generation cap for `mean_output`.
    #[arg(long, default_value_t = dior::manifest::DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
}

impl ExtractArgs {
    pub fn config(&self) -> ExtractionConfig {
        ExtractionConfig {
            layer: self.layer,
            strategy: self.token_strategy,
            prompt: self.prompt_spec,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated condition names; all manifest conditions by default.
    #[arg(long)]
    pub conditions: Option<String>,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    /// Unconditioned global image embedding.
    Clip,
    /// Image embedding projected onto a text-label subspace of the condition.
    Indirect,
    /// Conditional caption embedded as text.
    Capemb,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Clip => "clip",
            BaselineMethod::Indirect => "indirect",
            BaselineMethod::Capemb => "capemb",
        }
    }
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    pub method: BaselineMethod,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub conditions: Option<String>,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
    /// Seed of the encoders and of the dev/test split.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Dimension of the image and text encoders.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Label-generation fixtures (JSON lines); overrides the live endpoint.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Use each condition's class names from the manifest as the labels.
    #[arg(long, conflicts_with = "fixtures")]
    pub labels_from_manifest: bool,
    /// Number of labels to request per condition.
    #[arg(long, default_value_t = 10)]
    pub label_count: usize,
    /// Request 10..=100 labels and keep the count scoring best on a dev split.
    #[arg(long)]
    pub label_sweep: bool,
    /// Share of items held out for label-count selection.
    #[arg(long, default_value_t = 0.2)]
    pub dev_fraction: f64,
    /// Principal components: `auto` or a fixed count.
    #[arg(long, default_value = "auto")]
    pub components: String,
    #[arg(long, default_value = dior::baselines::LABEL_PROMPT_TEMPLATE)]
    pub label_template: String,
    /// Directory receiving one fitted subspace store per condition.
    #[arg(long)]
    pub subspace_dir: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset manifest; required for every metric except `genecis@k`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// GeneCIS manifest for `genecis@k`.
    #[arg(long)]
    pub genecis: Option<PathBuf>,
    /// Embedding store; repeat to evaluate several.
    #[arg(long)]
    pub store: Vec<PathBuf>,
    #[arg(long)]
    pub conditions: Option<String>,
    /// One of map@r, map@k, recall@k, genecis@k, ami (or e.g. `recall@10`).
    #[arg(long, default_value = "map@r")]
    pub metric: String,
    #[arg(long)]
    pub k: Option<usize>,
    /// Clustering seed for `ami`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the backend used for `genecis@k`.
    #[arg(long, default_value_t = 7)]
    pub backend_seed: u64,
    /// Include every query's value in the report lines.
    #[arg(long)]
    pub per_query: bool,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct SweepLayersArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub conditions: Option<String>,
    /// Retrieval metric scored per layer.
    #[arg(long, default_value = "map@r")]
    pub metric: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct SweepPromptsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub conditions: Option<String>,
    #[arg(long, default_value = "map@r")]
    pub metric: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub extract: ExtractArgs,
}

#[derive(Debug, Args)]
pub struct BenchCacheArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub conditions: Option<String>,
    /// Timed repetitions per image.
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Number of manifest items to time, from the start.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value = "verb=describe,oneword=1,cond=1")]
    pub prompt_spec: PromptSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Linear,
    FewShot,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub conditions: Option<String>,
    #[arg(long, value_enum, default_value = "linear")]
    pub protocol: ProbeKind,
    /// Training shots per class.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PlotTsneArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Condition whose embeddings and classes are plotted.
    #[arg(long)]
    pub condition: String,
    /// PNG file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the 2-d coordinates as JSON lines.
    #[arg(long)]
    pub coords: Option<PathBuf>,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 640)]
    pub size: u32,
}
