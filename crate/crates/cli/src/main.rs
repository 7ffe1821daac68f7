mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use germ_core::Error;

#[derive(Parser, Debug)]
#[command(name = "germ", version, about = "Outlier-free attention, quantization and low-rank adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic DNA corpus.
    GenCorpus(GenCorpusArgs),
    /// Generate a labelled motif-presence task (TSV: label, sequence).
    GenTask(GenTaskArgs),
    /// Train or apply a BPE vocabulary.
    Tokenizer {
        #[command(subcommand)]
        action: TokenizerCommand,
    },
    /// Masked-language-model pretraining.
    Pretrain(PretrainArgs),
    /// Switch a softmax checkpoint to Softmax1 and continue training briefly.
    Surgery(SurgeryArgs),
    /// Train and evaluate a sequence classifier.
    Finetune(FinetuneArgs),
    /// Fake-quantize a checkpoint and report the logit deviation.
    Quantize(QuantizeArgs),
    /// Outlier statistics and raw attention dumps.
    Diagnose(DiagnoseArgs),
    /// Build adapters that turn a frozen model into a target and verify them.
    TheoremCheck(TheoremCheckArgs),
    /// Write a random (frozen, target) pair of formal models.
    TheoremPair(TheoremPairArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// JSON corpus spec; defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenTaskArgs {
    #[arg(long, default_value = "TATAAA")]
    motif: String,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 48)]
    min_len: usize,
    #[arg(long, default_value_t = 120)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum TokenizerCommand {
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Output vocabulary file.
        #[arg(long)]
        vocab: PathBuf,
        /// Total vocabulary size, special tokens included.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// One line of space-separated ids per sequence.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["softmax", "softmax1"])]
    variant: Option<String>,
    #[arg(long)]
    corpus: PathBuf,
    /// Existing vocabulary; trained from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SurgeryArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Continued-training budget as a fraction of the base run's steps.
    #[arg(long, default_value_t = 0.2)]
    steps_frac: f64,
    /// Corpus for continued training; required when steps-frac > 0.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long, value_parser = ["frozen", "full", "lora", "qlora", "loftq"], default_value = "full")]
    mode: String,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Weight/activation bits, e.g. 8W/8A.
    #[arg(long, default_value = "8W/8A")]
    bits: String,
    #[arg(long, value_parser = ["traditional", "smoothquant"], default_value = "traditional")]
    method: String,
    /// Migration strength for smoothquant.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    calib: PathBuf,
    /// Sequences to measure deviation on; the calibration corpus when absent.
    #[arg(long)]
    sample: Option<PathBuf>,
    /// Cap on sequences read from each corpus.
    #[arg(long, default_value_t = 128)]
    max_sequences: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    sample: PathBuf,
    #[arg(long, default_value_t = 128)]
    max_sequences: usize,
    /// Number of sequences whose attention maps are dumped as CSV.
    #[arg(long, default_value_t = 1)]
    dump: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct TheoremCheckArgs {
    #[arg(long)]
    frozen: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Tokens per random input.
    #[arg(long, default_value_t = 6)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct TheoremPairArgs {
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frozen: PathBuf,
    #[arg(long)]
    target: PathBuf,
}

/// Failure classes with stable stderr prefixes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) | CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "E_USAGE: {m}"),
            CliError::Domain(m) => write!(f, "E_DOMAIN: {m}"),
            CliError::Io(m) => write!(f, "E_IO: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => CliError::Io(e.to_string()),
            Error::InvalidConfig(_) | Error::InvalidBits(_) | Error::AlphaOutOfRange(_) => CliError::Usage(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
