//! `iconoforge` command line: wires the curation, training, evaluation and
//! review modules into one workflow.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod service;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "iconoforge", version, about = "Iconography dataset curation and classification pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Record store directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic glyph corpus.
    Fixture(FixtureArgs),
    /// Import a manifest into the record store.
    Ingest(IngestArgs),
    /// Remove exact duplicates and queue near-duplicate pairs.
    Dedup(DedupArgs),
    /// Queue fragment candidates and run the figure filter.
    Filter(FilterArgs),
    /// Derive labels from metadata keywords.
    Label(LabelArgs),
    /// Stratified train/val/test split.
    Split(SplitArgs),
    /// Class counts, split sizes and co-occurrence.
    Stats(StatsArgs),
    /// Train backbone weights on the shape pretext task.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier on the train split.
    Train(TrainArgs),
    /// Evaluate a model on a split.
    Eval(EvalArgs),
    /// Train and validate one model per freeze level.
    Ablation(AblationArgs),
    /// Render a class activation map overlay.
    Cam(CamArgs),
    /// Classify one image file.
    Predict(PredictArgs),
    /// Queue confident model labels for unlabeled images.
    Propose(ProposeArgs),
    /// Run the review service.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fixture(_) => "fixture",
            Command::Ingest(_) => "ingest",
            Command::Dedup(_) => "dedup",
            Command::Filter(_) => "filter",
            Command::Label(_) => "label",
            Command::Split(_) => "split",
            Command::Stats(_) => "stats",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablation(_) => "ablation",
            Command::Cam(_) => "cam",
            Command::Predict(_) => "predict",
            Command::Propose(_) => "propose",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n_per_class: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "NAME")]
    pub source: String,
    /// Directory relative uris are resolved against (default: the manifest's directory).
    #[arg(long, value_name = "DIR")]
    pub images_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Maximum Hamming distance of a near-duplicate pair.
    #[arg(long, value_name = "N")]
    pub threshold: Option<u32>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub fragments: bool,
    #[arg(long)]
    pub pose: bool,
    /// Detector command; reads {"image_path"} on stdin, prints {"n_figures"}.
    #[arg(long, value_name = "CMD")]
    pub detector: Option<String>,
    /// Without --detector, figure counts come from this metadata field.
    #[arg(long, value_name = "KEY", default_value = iconoforge::fixture::METADATA_FIGURES)]
    pub figures_field: String,
    #[arg(long, value_delimiter = ',', value_name = "WORDS")]
    pub fragment_keywords: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, value_name = "PATH")]
    pub keywords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "0.8,0.1,0.1")]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub cooccurrence: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Output weight file (default: <store>/backbone.ifw).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output checkpoint (default: <store>/model.ifm).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub pretrained: Option<PathBuf>,
    #[arg(long, value_name = "LEVEL")]
    pub freeze: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_oversample: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report file (default: <store>/reports/eval-<split>.json).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long, value_delimiter = ',', default_value = "none,stem,stem+block1,stem+block2,stem+block3,all_backbone")]
    pub levels: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_name = "PATH")]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_oversample: bool,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "ID")]
    pub record: String,
    /// Class code (default: the top-scoring class).
    #[arg(long, value_name = "CODE")]
    pub class: Option<String>,
    #[arg(long, default_value_t = iconoforge::explain::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
}
