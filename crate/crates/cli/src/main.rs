mod commands;
mod dataset;
mod error;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "l0drop", version, about = "Sparse source encodings for sequence-to-sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary and id-encoded corpus from text or a toy task.
    Prepare(PrepareArgs),
    /// Train from scratch, or continue a run with --resume.
    Train(TrainArgs),
    /// Finetune a trained checkpoint with learned gates or a fixed pattern.
    Finetune(FinetuneArgs),
    /// Translate text with beam search and report sparsity.
    Decode(DecodeArgs),
    /// Time dense versus compacted cross-attention.
    Bench(BenchArgs),
    /// Write attention-mass and self-attention entropy data files.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    /// 64-bit floats, reproducible to the bit.
    Verify,
    /// 32-bit floats.
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PatternKind {
    Tag,
    Freq,
    InvFreq,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateChoice {
    /// Learned gates for models trained with them, none otherwise.
    Auto,
    Expected,
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    AttentionMass,
    Entropy,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct PatternArgs {
    /// Replace learned gates with a rule-based keep/drop mask.
    #[arg(long, value_enum)]
    pub pattern: Option<PatternKind>,
    /// Target share of source tokens dropped by the frequency patterns.
    #[arg(long)]
    pub coverage: Option<f64>,
    /// Token frequency table for the frequency patterns (`token<TAB>count`).
    #[arg(long)]
    pub freq_table: Option<PathBuf>,
    /// Tags aligned with the source tokens, one sentence per line.
    #[arg(long)]
    pub tags_file: Option<PathBuf>,
    /// Comma-separated tags whose tokens the tag pattern drops.
    #[arg(long, value_delimiter = ',')]
    pub drop_tags: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Source text, one whitespace-tokenized sentence per line.
    #[arg(long, requires = "tgt", conflicts_with = "toy")]
    pub src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    pub tgt: Option<PathBuf>,
    /// Encode with an existing vocabulary instead of building one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Generate a synthetic task: copy, reverse or sorted.
    #[arg(long)]
    pub toy: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub toy_vocab: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long, default_value_t = 10_000)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Tags aligned with --src, copied into the prepared directory.
    #[arg(long)]
    pub tags_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key=value` training and model settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prepared data directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a checkpoint written by train or finetune; only
    /// --steps may change.
    #[arg(long, conflicts_with_all = ["config", "seed", "lambda", "overrides"])]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::Verify)]
    pub mode: Precision,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Total number of optimizer steps (including resumed ones).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Extra `key=value` overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub pattern: PatternArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Trained baseline checkpoint.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `key=value` optimization overrides; model keys are taken from --from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::Verify)]
    pub mode: Precision,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of finetuning steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub pattern: PatternArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary the checkpoint was trained with.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Source text, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Reference translations for accuracy and n-gram overlap.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_penalty: f64,
    /// Read cross-attention from the compacted memory (default).
    #[arg(long, overrides_with = "dense")]
    pub sparse: bool,
    /// Attend over the full gated memory.
    #[arg(long, overrides_with = "sparse")]
    pub dense: bool,
    #[arg(long, value_enum, default_value_t = GateChoice::Auto)]
    pub gates: GateChoice,
    #[command(flatten)]
    pub pattern: PatternArgs,
    /// Per-token gate values: sentence, position, token, log alpha, gate, kept.
    #[arg(long)]
    pub gate_dump: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::Verify)]
    pub mode: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Source lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 64])]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.4, 0.7])]
    pub sparsity: Vec<f64>,
    /// Decoder steps per run.
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 7)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also time whole-corpus decoding of --input with this checkpoint.
    #[arg(long, requires_all = ["vocab", "input"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_penalty: f64,
    #[arg(long, value_enum, default_value_t = Precision::Fast)]
    pub mode: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Source text.
    #[arg(long)]
    pub src: PathBuf,
    /// Target text fed to the decoder under teacher forcing.
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, value_enum, default_value_t = Analysis::Both)]
    pub which: Analysis,
    #[arg(long, value_enum, default_value_t = GateChoice::Auto)]
    pub gates: GateChoice,
    #[command(flatten)]
    pub pattern: PatternArgs,
    /// Mass below which a word counts as barely attended.
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = Precision::Verify)]
    pub mode: Precision,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
