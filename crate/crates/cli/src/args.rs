use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "tagembed", version, about = "Train and query a joint image/tag embedding")]
pub struct Cli {
    /// key=value file whose entries act as flags; explicit flags win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    pub print_config: bool,

    /// Cap on worker threads
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a clustered synthetic corpus
    GenSynthetic(GenArgs),
    /// Train a projector and word vectors into a run directory
    Train(TrainArgs),
    /// Top-k tags for each image of a split
    Tag(TagArgs),
    /// Top-n images for a text query
    Retrieve(RetrieveArgs),
    /// Precision/recall/F1 at top-k on a split
    Evaluate(EvaluateArgs),
    /// Re-fit word vectors never updated by training
    SnapOov(SnapArgs),
    /// Per-batch timing of the objectives
    Bench(BenchArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Train(_) => "train",
            Command::Tag(_) => "tag",
            Command::Retrieve(_) => "retrieve",
            Command::Evaluate(_) => "evaluate",
            Command::SnapOov(_) => "snap-oov",
            Command::Bench(_) => "bench",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn get(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    #[arg(long, default_value_t = 100)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 10)]
    pub tags_per_cluster: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Probability that a tag slot holds another cluster's tag
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.15)]
    pub feature_noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Corpus directory (features.tsv, tags.tsv, optional vocab.tsv)
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create or resume
    #[arg(long)]
    pub out: PathBuf,
    /// train,val,test fractions
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split: String,
    /// Used when the corpus has no vocab.tsv
    #[arg(long, default_value_t = 1)]
    pub min_freq: u64,
    #[arg(long, default_value_t = 432_213)]
    pub max_vocab: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value = "sampled-nce",
          value_parser = ["sampled-nce", "full-xent", "fast0tag", "fast0tag-sampled", "avg-wv"])]
    pub loss: String,
    /// Positives per image
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    /// Negatives per image
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Weight of both tag co-occurrence terms
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value = "unigram", value_parser = ["unigram", "epoch-pool", "adjacent"])]
    pub neg_strategy: String,
    #[arg(long, default_value_t = 1000)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub unigram_power: f64,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub optimize_wordvecs: OnOff,
    /// Pretrained vectors in text format
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    /// Policy for vocabulary tokens missing from --word-vectors
    #[arg(long, default_value = "random", value_parser = ["random", "error"])]
    pub missing_vectors: String,
    /// Word-vector dimension
    #[arg(long, default_value_t = 300)]
    pub dim: usize,
    /// Hidden layer widths, comma separated, or "none"
    #[arg(long, default_value = "512")]
    pub hidden: String,
    #[arg(long, default_value = "relu", value_parser = ["relu", "tanh"])]
    pub activation: String,
    #[arg(long, default_value = "adam", value_parser = ["sgd", "sgd-momentum", "adam"])]
    pub optimizer: String,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr_table: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 5)]
    pub eval_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from the checkpoint in --out
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub resume: OnOff,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunArgs {
    /// Run directory written by `train`
    #[arg(long)]
    pub run: PathBuf,
    /// Corpus directory
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["train", "val", "test", "all"])]
    pub split: Option<String>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct TagArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Predictions file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct RetrieveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunArgs,
    /// Query tokens, separated by spaces or commas
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 6)]
    pub top: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Also write the JSON report here
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Score only tags shared by the corpus and the checkpoint vocabularies
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub intersection: OnOff,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct SnapArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to write (default: overwrite the run's checkpoint)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub anchors: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
#[serde(rename_all = "kebab-case")]
pub struct BenchArgs {
    #[arg(long, default_value = "sampled-nce,fast0tag-sampled")]
    pub losses: String,
    #[arg(long, default_value = "10,20")]
    pub p: String,
    #[arg(long, default_value = "10,20")]
    pub n: String,
    #[arg(long, default_value = "10000")]
    pub vocab: String,
    #[arg(long, default_value_t = 9)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Table file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
