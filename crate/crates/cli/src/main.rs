//! `semtok`: train visual tokenizers, pretrain with masked image modeling,
//! tokenize corpora and evaluate representations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semtok_core::eval::ReprMode;
use semtok_core::Error;

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "SEMTOK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "semtok", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic image corpus.
    MakeCorpus(MakeCorpusArgs),
    /// Train a vector-quantized tokenizer against a frozen teacher.
    TrainTokenizer(TrainArgs),
    /// Pretrain a ViT by predicting tokenizer codes at masked patches.
    Pretrain(PretrainArgs),
    /// Write the code grid of every image in a corpus.
    Tokenize(TokenizeArgs),
    /// Fit a linear probe on frozen backbone representations.
    Probe(ProbeArgs),
    /// Summarize codebook usage and group patches by code.
    CodebookReport(ReportArgs),
}

#[derive(Debug, Args)]
struct MakeCorpusArgs {
    /// TOML synthetic spec; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; optional when resuming.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Teacher id of the form `frozen-vit:<seed>`.
    #[arg(long)]
    teacher: Option<String>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained tokenizer checkpoint supplying the targets.
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Output token-grid file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Pretraining checkpoint whose backbone is probed.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = ReprMode::MeanPatch)]
    mode: ReprMode,
    /// TOML probe settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Patches kept per code in the grouping.
    #[arg(long, default_value_t = semtok_core::eval::DEFAULT_TOP_N)]
    top_n: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Geometry(_) | Error::InfeasibleMask(_)) => 2,
        Some(Error::Divergence { .. } | Error::NonFinite(_)) => 3,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::MakeCorpus(a) => commands::make_corpus(a),
        Command::TrainTokenizer(a) => commands::train_tokenizer(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Tokenize(a) => commands::tokenize(a),
        Command::Probe(a) => commands::probe(a),
        Command::CodebookReport(a) => commands::codebook_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
