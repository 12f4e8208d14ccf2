//! `vtp`: reproducible vocabulary transplant pipelines.
//!
//! Exit codes: 0 success, 2 bad flags or config, 3 I/O failure, 4 domain error.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use error::CliError;

#[derive(Debug, Parser, Serialize)]
#[command(name = "vtp", version, about = "Vocabulary transplant toolkit")]
pub struct Cli {
    /// Worker thread cap for parallel sections.
    #[arg(long, global = true, env = "VTP_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    /// Seed for subcommands that draw random numbers outside a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Learn a BPE vocabulary from one or more corpora.
    LearnVocab(LearnVocabArgs),
    /// Move a checkpoint onto a new vocabulary.
    Transplant(TransplantArgs),
    /// Subtoken length distribution of a corpus under one vocabulary.
    Stats(StatsArgs),
    /// Length distributions under two vocabularies and their ratio.
    Compare(CompareArgs),
    /// Train the toy masked language model.
    Train(TrainArgs),
    /// Full warm-start versus cold-start comparison.
    Experiment(ExperimentArgs),
    /// Write the bundled synthetic source and target corpora.
    Synth(SynthArgs),
    /// Write a randomly initialized checkpoint for a vocabulary.
    Init(InitArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::LearnVocab(_) => "learn-vocab",
            Command::Transplant(_) => "transplant",
            Command::Stats(_) => "stats",
            Command::Compare(_) => "compare",
            Command::Train(_) => "train",
            Command::Experiment(_) => "experiment",
            Command::Synth(_) => "synth",
            Command::Init(_) => "init",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LearnVocabArgs {
    /// Corpus files, one document per line.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Per-corpus weights summing to 1. Defaults to 0.8,0.2 for two corpora
    /// and equal shares otherwise.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = vtp_core::bpe::DEFAULT_MIN_PAIR_FREQUENCY)]
    pub min_pair_freq: u64,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NewTokenInitArg {
    Mean,
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct TransplantArgs {
    #[arg(long)]
    pub old_ckpt: PathBuf,
    #[arg(long)]
    pub new_vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = NewTokenInitArg::Mean)]
    pub new_token_init: NewTokenInitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Csv,
    Json,
    Svg,
}

impl From<FormatArg> for vtp_core::corpus_stats::ReportFormat {
    fn from(f: FormatArg) -> Self {
        use vtp_core::corpus_stats::ReportFormat;
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long, default_value_t = vtp_core::corpus_stats::DEFAULT_BUCKET_WIDTH, value_parser = positive_usize)]
    pub bucket_width: usize,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Baseline vocabulary (numerator of the ratio).
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub vocab_b: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long, default_value_t = vtp_core::corpus_stats::DEFAULT_BUCKET_WIDTH, value_parser = positive_usize)]
    pub bucket_width: usize,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// `random` or `ckpt:<dir>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    Random,
    Ckpt(PathBuf),
}

impl FromStr for InitArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(InitArg::Random),
            _ => match s.strip_prefix("ckpt:") {
                Some(p) if !p.is_empty() => Ok(InitArg::Ckpt(PathBuf::from(p))),
                _ => Err(format!("expected `random` or `ckpt:<path>`, got {s:?}")),
            },
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON with optional `model`, `train` and `tokenizer` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "random")]
    pub init: InitArg,
    /// Vocabulary for random init; checkpoints carry their own.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub num_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// Experiment JSON; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source then target corpus. Without it the bundled synthetic pair is used.
    #[arg(long, num_args = 1)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Overrides both pretraining and per-seed training steps.
    #[arg(long)]
    pub num_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = vtp_core::toy_mlm::synthetic::BUNDLED_SOURCE_SENTENCES)]
    pub source_sentences: usize,
    #[arg(long, default_value_t = vtp_core::toy_mlm::synthetic::BUNDLED_TARGET_SENTENCES)]
    pub target_sentences: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InitArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON `TransformerConfig`; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be positive".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn configure_threads(threads: Option<u64>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads(cli.threads).and_then(|_| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vtp {}: error: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
