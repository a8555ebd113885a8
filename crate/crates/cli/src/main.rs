//! `sanlm`: vocabulary building, training, sentence scoring, N-best
//! rescoring and WER evaluation for self-attention language models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sanlm_core::model::Direction;

/// Bad flags, configuration or parameter values.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "sanlm", version, about = "Self-attention language models for N-best rescoring")]
struct Cli {
    /// TOML configuration file; flags and SANLM_* variables override it.
    #[arg(long, global = true, env = "SANLM_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true, env = "SANLM_SEED")]
    seed: Option<u64>,
    /// Worker threads for scoring (1 keeps runs bit-reproducible across
    /// machines).
    #[arg(long, global = true, env = "SANLM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frequency-ranked vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a bidirectional or unidirectional model.
    Train(TrainArgs),
    /// Score sentences with a trained model.
    Score(ScoreArgs),
    /// Rescore N-best lists and write the new top-1 transcripts.
    Rescore(RescoreArgs),
    /// Choose λ on development lists by corpus WER.
    Sweep(SweepArgs),
    /// WER of the acoustic 1-best, the oracle and optional transcripts.
    Evaluate(EvalArgs),
    /// Error counts by hypothesis word position.
    AnalyzePositions(EvalArgs),
    /// Generate a synthetic corpus and N-best lists.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// One sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of words kept, in addition to the special tokens.
    #[arg(long)]
    size: Option<usize>,
    /// Output directory.
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out sentences for loss and accuracy monitoring.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long, env = "SANLM_VOCAB")]
    vocab: Option<String>,
    #[arg(long, env = "SANLM_MODE")]
    mode: Option<Direction>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Write a checkpoint every this many steps (0: only the final one).
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the vocabulary recorded in the checkpoint.
    #[arg(long, env = "SANLM_VOCAB")]
    vocab: Option<String>,
    /// One sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LmArgs {
    /// One checkpoint, or one bidirectional and one unidirectional.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, env = "SANLM_VOCAB")]
    vocab: Option<String>,
    /// Weight of the bidirectional score when two models are given.
    #[arg(long, env = "SANLM_ALPHA")]
    alpha: Option<f64>,
    /// Keep at most this many hypotheses per list.
    #[arg(long)]
    max_n: Option<usize>,
}

#[derive(Args, Debug)]
struct RescoreArgs {
    #[arg(long)]
    nbest: PathBuf,
    #[command(flatten)]
    lm: LmArgs,
    /// LM weight in `(1 − λ)·am + λ·lm`.
    #[arg(long, env = "SANLM_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Development lists with references.
    #[arg(long)]
    nbest: PathBuf,
    #[command(flatten)]
    lm: LmArgs,
    /// Comma-separated λ values (default 0, 0.05, …, 1).
    #[arg(long, env = "SANLM_GRID")]
    grid: Option<String>,
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// N-best lists; supply references, the acoustic 1-best and the oracle.
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// References as `utt_id<TAB>text` lines; override those in the lists.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Transcripts as `utt_id<TAB>text` lines, such as a rescoring top-1.
    #[arg(long)]
    hyp: Option<PathBuf>,
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    #[arg(long, default_value_t = 100)]
    lists: usize,
    #[arg(long, default_value_t = 10)]
    list_size: usize,
    /// Restrict corruptions to the first this many words.
    #[arg(long)]
    early: Option<usize>,
    #[arg(long, env = "SANLM_OUT")]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use sanlm_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Param(_) => 1,
                E::Shape { .. } | E::NonScalar(_) | E::NoTargets => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
