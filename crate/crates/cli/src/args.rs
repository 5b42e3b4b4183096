//! Command-line surface. Every argument struct is also serialized verbatim
//! into the report of the command it configures.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "sfns", version, about = "Granular sparse retrieval for fuzzy name search")]
pub struct Cli {
    /// Seed for every randomized stage.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Upper bound on worker threads. All stages currently run on one.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train or apply the unigram tokenizer.
    #[command(subcommand)]
    Tokenize(TokenizeCmd),
    /// Train the document encoder or encode documents with it.
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Build, query and inspect inverted index files.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Mine training data from engagement logs.
    #[command(subcommand)]
    Mine(MineCmd),
    /// Retrieval benchmarks.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Feedback-loop simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Synthetic data.
    #[command(subcommand)]
    Gen(GenCmd),
    /// One-off search with any retrieval method.
    Search(SearchArgs),
}

#[derive(Debug, Subcommand)]
pub enum TokenizeCmd {
    Train(TokenizeTrainArgs),
    Apply(TokenizeApplyArgs),
}

#[derive(Debug, Subcommand)]
pub enum EncoderCmd {
    Train(EncoderTrainArgs),
    Encode(EncoderEncodeArgs),
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    Build(IndexBuildArgs),
    Search(IndexSearchArgs),
    Stats(IndexStatsArgs),
}

#[derive(Debug, Subcommand)]
pub enum MineCmd {
    Pairs(MinePairsArgs),
    Negatives(MineNegativesArgs),
    Split(MineSplitArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    Run(EvalRunArgs),
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    Replay(SimReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum GenCmd {
    Synth(GenSynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeTrainArgs {
    /// Text corpus, one line per record.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_piece_len: usize,
    #[arg(long, visible_alias = "output")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeApplyArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Text file, one line per record.
    #[arg(long, required_unless_present = "text", conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// A single text to segment.
    #[arg(long)]
    pub text: Option<String>,
    /// JSONL output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EncoderTrainArgs {
    /// Mined triples, JSONL `{"q", "pos", "negs"}`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Catalog whose document frequencies weight the queries. Without it
    /// the texts of the triples' documents are used.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_reg: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    pub init_bias: f32,
    /// Per-step loss and sparsity, JSONL.
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EncoderEncodeArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Catalog JSONL `{"id", "text"}`.
    #[arg(long)]
    pub docs: PathBuf,
    /// Vectors JSONL `{"id", "text", "vec": {"<piece>": weight}}`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexBuildArgs {
    /// Precomputed vectors, JSONL `{"id", "text", "vec": {"<piece>": weight}}`.
    #[arg(long, required_unless_present = "catalog", conflicts_with = "catalog")]
    pub vectors: Option<PathBuf>,
    /// Catalog JSONL `{"id", "text"}`, encoded on the fly.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Encoder parameters for document expansion when building from a
    /// catalog; binary token weights otherwise.
    #[arg(long, conflicts_with = "vectors")]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryEncoder {
    /// Inverse document frequency weights.
    Idf,
    /// Weight 1 per token.
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexSearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = QueryEncoder::Idf)]
    pub encoder: QueryEncoder,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexStatsArgs {
    #[arg(long)]
    pub index: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MinePairsArgs {
    /// Engagement log, JSONL `{"q", "e", "n", "day"}`.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_engagements: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Trigram,
    Fuzzy,
    Sparse,
}

/// Where documents come from and how a retriever over them is configured.
#[derive(Debug, Args, Serialize)]
pub struct SourceArgs {
    /// Index file; its stored texts also feed the trigram and fuzzy methods.
    #[arg(long, required_unless_present = "catalog", conflicts_with = "catalog")]
    pub index: Option<PathBuf>,
    /// Catalog JSONL `{"id", "text"}`.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Tokenizer model; required by the sparse method.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Encoder parameters for sparse document expansion over a catalog.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub max_edits: usize,
    #[arg(long, default_value_t = 0)]
    pub prefix_lock: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MineNegativesArgs {
    /// Mined pairs, JSONL `{"q", "pos", "negs"}`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_engagements: u32,
    /// Negatives kept per pair.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Candidates retrieved per pair before filtering.
    #[arg(long, default_value_t = 50)]
    pub depth: usize,
    /// Retriever over the logged queries.
    #[arg(long, value_enum, default_value_t = Method::Trigram)]
    pub method: Method,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MineSplitArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_engagements: u32,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    /// Manifest JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalRunArgs {
    #[arg(long, value_enum, default_value_t = Method::Sparse)]
    pub method: Method,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceArgs,
    /// Queries JSONL `{"id", "text", "category", "tags"}`.
    #[arg(long)]
    pub queries: PathBuf,
    /// Judgments JSONL `{"query", "docs"}`.
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,25")]
    pub k: Vec<usize>,
    /// Report JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the metrics as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelArg {
    Trigram,
    Sparse,
    Fuzzy,
    None,
    Oracle,
}

#[derive(Debug, Args, Serialize)]
pub struct SimReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long, value_enum, default_value_t = ChannelArg::Sparse)]
    pub channel: ChannelArg,
    #[arg(long, default_value_t = 10)]
    pub fuzzy_top: usize,
    /// Cutoff for recall.
    #[arg(long, default_value_t = 25)]
    pub k: usize,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    /// Evaluate the whole log every epoch instead of revealing one day at a
    /// time.
    #[arg(long)]
    pub replay_all_each_epoch: bool,
    #[arg(long, default_value_t = 4)]
    pub min_engagements: u32,
    /// Tokenizer model; required by the sparse channel.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub max_edits: usize,
    #[arg(long, default_value_t = 0)]
    pub prefix_lock: usize,
    /// Report JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 600)]
    pub entities: usize,
    #[arg(long, default_value_t = 4)]
    pub queries_per_entity: usize,
    /// Receives catalog.jsonl, queries.jsonl, qrels.jsonl and log.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long, value_enum, default_value_t = Method::Sparse)]
    pub method: Method,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}
