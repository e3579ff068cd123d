//! `hatemask`: preprocess corpora, build vocabularies, train and evaluate
//! offensive-text classifiers and maskers, and run vocabulary-size sweeps.

mod commands;
mod config;
mod data;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{InputFormat, Masker, Side, VocabArgs, VocabKind};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::{resolve_report_dir, EvalArgs, DEFAULT_SWEEP_SIZES};

#[derive(Parser)]
#[command(name = "hatemask", version, about = "Arabic offensive-text detection and masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a corpus: normalize letters, strip marks, collapse repeats, drop non-Arabic tokens.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "lines")]
        format: InputFormat,
        /// JSON file with normalization switches.
        #[arg(long)]
        normalization: Option<PathBuf>,
    },
    /// Build a word or WordPiece vocabulary file from a corpus.
    Vocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Entries including special tokens; pieces for WordPiece.
        #[arg(long)]
        max_size: usize,
        #[arg(long, value_enum, default_value = "source")]
        kind: VocabKind,
        #[arg(long, value_enum, default_value = "lines")]
        format: InputFormat,
        /// Which side of a parallel corpus to read.
        #[arg(long, value_enum, default_value = "source")]
        side: Side,
        /// Use the text as is instead of preprocessing it first.
        #[arg(long)]
        raw: bool,
    },
    /// Train the model described by a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a labeled or parallel test file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Vocabulary file the checkpoint is expected to use (source side for maskers).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Target vocabulary file a masker checkpoint is expected to use.
        #[arg(long)]
        target_vocab: Option<PathBuf>,
        /// Evaluate the test text as is instead of preprocessing it first.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Replace offensive words with star runs.
    Mask {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the lexicon lookup instead of a trained model.
        #[arg(long, requires = "lexicon")]
        oracle: bool,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Longest generated output, in tokens.
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Sentences to mask; stdin lines when omitted.
        text: Vec<String>,
    },
    /// Train and evaluate one masker per vocabulary size.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_SIZES)]
        sizes: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, max_epochs: Option<usize>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    if let Some(epochs) = max_epochs {
        if epochs == 0 {
            return Err(CliError::config(vec!["--max-epochs must be >= 1".into()]));
        }
        cfg.training_mut().max_epochs = epochs;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess { input, output, format, normalization } => {
            let cfg = commands::load_normalization(normalization.as_deref())?;
            let s = commands::cmd_preprocess(&input, &output, format, &cfg)?;
            println!(
                "lines: {} read, {} written, {} dropped; tokens: {} read, {} written, {} dropped",
                s.lines_read, s.lines_written, s.lines_dropped, s.tokens_read, s.tokens_written, s.tokens_dropped
            );
        }
        Command::Vocab { input, output, max_size, kind, format, side, raw } => {
            let args = VocabArgs { input: &input, output: &output, max_size, kind, format, side, raw };
            let n = commands::cmd_vocab(&args)?;
            println!("wrote {n} entries to {}", output.display());
        }
        Command::Train { config, seed, report_dir, max_epochs } => {
            let cfg = load_config(&config, seed, max_epochs)?;
            let dir = resolve_report_dir(report_dir, cfg.eval.report_dir.as_deref());
            run::cmd_train(&cfg, &dir)?;
        }
        Command::Eval { checkpoint, test, vocab, target_vocab, raw, report_dir } => {
            let dir = resolve_report_dir(report_dir, None);
            run::cmd_eval(&EvalArgs {
                checkpoint: &checkpoint,
                test: &test,
                vocab: vocab.as_deref(),
                target_vocab: target_vocab.as_deref(),
                preprocess: !raw,
                report_dir: &dir,
            })?;
        }
        Command::Mask { checkpoint, oracle, lexicon, max_len, text } => {
            let masker = Masker::load(checkpoint.as_deref(), lexicon.as_deref(), oracle, max_len)?;
            commands::cmd_mask(&masker, &text)?;
        }
        Command::Sweep { config, sizes, seed, report_dir } => {
            let cfg = load_config(&config, seed, None)?;
            let dir = resolve_report_dir(report_dir, cfg.eval.report_dir.as_deref());
            run::cmd_sweep(&cfg, &sizes, &dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hatemask: {e}");
            e.exit_code()
        }
    }
}
