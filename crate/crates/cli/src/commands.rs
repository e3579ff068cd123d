//! The `preprocess`, `vocab` and `mask` commands.

use std::io::BufRead;
use std::path::Path;

use clap::ValueEnum;
use hatemask_core::corpus::{
    mask_with_lexicon, parse_labeled_tsv, parse_parallel, sanitize_field, validate_pair, CorpusError, Lexicon, ParallelPair,
};
use hatemask_core::maskgen::{greedy_decode, star_run_lint, TrainedMasker};
use hatemask_core::text::{
    build_source_vocab, build_word_vocab, preprocess, tokens, train_wordpiece, NormalizationConfig,
};
use serde::Serialize;

use crate::data::target_normalization;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// One sentence per line.
    Lines,
    /// `id<TAB>text<TAB>label` rows.
    Labeled,
    /// `source<TAB>target` rows.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VocabKind {
    /// PAD and UNK reserved; used by classifiers and masker inputs.
    Source,
    /// PAD, UNK, START and END reserved; used by masker outputs.
    Target,
    /// WordPiece subword pieces.
    Wordpiece,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Source,
    Target,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn load_normalization(path: Option<&Path>) -> Result<NormalizationConfig, CliError> {
    let Some(path) = path else { return Ok(NormalizationConfig::default()) };
    serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::config(vec![format!("{}: normalization config: {e}", path.display())]))
}

#[derive(Debug, Default, PartialEq, Eq, Serialize)]
pub struct PreprocessSummary {
    pub lines_read: usize,
    pub lines_written: usize,
    pub lines_dropped: usize,
    pub tokens_read: usize,
    pub tokens_written: usize,
    pub tokens_dropped: usize,
}

impl PreprocessSummary {
    fn count(&mut self, before: &str, after: &str) {
        self.tokens_read += tokens(before).count();
        self.tokens_written += tokens(after).count();
    }

    fn finish(&mut self) {
        self.lines_dropped = self.lines_read - self.lines_written;
        self.tokens_dropped = self.tokens_read.saturating_sub(self.tokens_written);
    }
}

/// Cleans every line of `input` into `output`. Lines that end up empty are
/// dropped; parallel rows are also dropped when cleaning breaks the pair.
pub fn cmd_preprocess(
    input: &Path,
    output: &Path,
    format: InputFormat,
    cfg: &NormalizationConfig,
) -> Result<PreprocessSummary, CliError> {
    let text = read(input)?;
    let mut summary = PreprocessSummary::default();
    let mut out = String::new();
    match format {
        InputFormat::Lines => {
            for line in text.lines() {
                summary.lines_read += 1;
                let clean = preprocess(line, cfg);
                summary.count(line, &clean);
                if !clean.is_empty() {
                    summary.lines_written += 1;
                    out.push_str(&clean);
                    out.push('\n');
                }
            }
        }
        InputFormat::Labeled => {
            let examples = parse_labeled_tsv(&text).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
            for ex in &examples {
                summary.lines_read += 1;
                let clean = preprocess(&ex.text, cfg);
                summary.count(&ex.text, &clean);
                if !clean.is_empty() {
                    summary.lines_written += 1;
                    out.push_str(&format!("{}\t{}\t{}\n", sanitize_field(&ex.id), clean, ex.label));
                }
            }
        }
        InputFormat::Parallel => {
            let pairs = parse_parallel(&text).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
            let target_cfg = target_normalization(cfg);
            for pair in &pairs {
                summary.lines_read += 1;
                let source = preprocess(&pair.source, cfg);
                let target = preprocess(&pair.target, &target_cfg);
                summary.count(&pair.source, &source);
                let cleaned = ParallelPair::new(source, target);
                if !cleaned.source.is_empty() && validate_pair(&cleaned).is_ok() {
                    summary.lines_written += 1;
                    out.push_str(&format!("{}\t{}\n", cleaned.source, cleaned.target));
                }
            }
        }
    }
    summary.finish();
    write(output, &out)?;
    Ok(summary)
}

/// Texts of one file, cleaned unless `raw` is set.
fn corpus_texts(input: &Path, format: InputFormat, side: Side, raw: bool) -> Result<Vec<String>, CliError> {
    let text = read(input)?;
    let with_path = |e: CorpusError| CliError::data(format!("{}: {e}", input.display()));
    let lines: Vec<String> = match format {
        InputFormat::Lines => text.lines().map(str::to_string).collect(),
        InputFormat::Labeled => parse_labeled_tsv(&text).map_err(with_path)?.into_iter().map(|e| e.text).collect(),
        InputFormat::Parallel => parse_parallel(&text)
            .map_err(with_path)?
            .into_iter()
            .map(|p| match side {
                Side::Source => p.source,
                Side::Target => p.target,
            })
            .collect(),
    };
    if raw {
        return Ok(lines);
    }
    let cfg = match side {
        Side::Source => NormalizationConfig::default(),
        Side::Target => NormalizationConfig::masking(),
    };
    Ok(lines.iter().map(|l| preprocess(l, &cfg)).collect())
}

pub struct VocabArgs<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub max_size: usize,
    pub kind: VocabKind,
    pub format: InputFormat,
    pub side: Side,
    pub raw: bool,
}

/// Builds a vocabulary file; returns the number of entries written.
pub fn cmd_vocab(args: &VocabArgs) -> Result<usize, CliError> {
    let texts = corpus_texts(args.input, args.format, args.side, args.raw)?;
    let (contents, size) = match args.kind {
        VocabKind::Source => {
            let v = build_source_vocab(&texts, args.max_size)?;
            (v.to_file_string(), v.len())
        }
        VocabKind::Target => {
            let v = build_word_vocab(&texts, args.max_size)?;
            (v.to_file_string(), v.len())
        }
        VocabKind::Wordpiece => {
            let m = train_wordpiece(&texts, args.max_size)?;
            (m.to_file_string(), m.piece_count())
        }
    };
    write(args.output, &contents)?;
    Ok(size)
}

pub enum Masker {
    Neural { model: Box<TrainedMasker>, max_len: usize },
    Oracle(Lexicon),
}

impl Masker {
    pub fn load(checkpoint: Option<&Path>, lexicon: Option<&Path>, oracle: bool, max_len: usize) -> Result<Self, CliError> {
        if oracle {
            let path = lexicon.ok_or_else(|| CliError::config(vec!["--oracle requires --lexicon".into()]))?;
            return Ok(Masker::Oracle(Lexicon::load(path)?));
        }
        let path = checkpoint.ok_or_else(|| CliError::config(vec!["either --checkpoint or --oracle is required".into()]))?;
        if !path.is_file() {
            return Err(CliError::data(format!("file not found: {}", path.display())));
        }
        let model = TrainedMasker::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(Masker::Neural { model: Box::new(model), max_len })
    }

    /// Masks one sentence; the second value is a lint warning for neural output.
    pub fn mask(&self, text: &str) -> Result<(String, Option<String>), CliError> {
        let clean = preprocess(text, &NormalizationConfig::default());
        match self {
            Masker::Oracle(lexicon) => Ok((mask_with_lexicon(&clean, lexicon), None)),
            Masker::Neural { model, max_len } => {
                let decoded = greedy_decode(&model.model, &clean, *max_len)?;
                let warning = star_run_lint(&clean, &decoded.text);
                Ok((decoded.text, warning))
            }
        }
    }
}

/// Masks each text, or each stdin line when no text is given.
pub fn cmd_mask(masker: &Masker, texts: &[String]) -> Result<(), CliError> {
    let run = |text: &str| -> Result<(), CliError> {
        let (masked, warning) = masker.mask(text)?;
        if let Some(w) = warning {
            eprintln!("warning: {w}");
        }
        println!("{masked}");
        Ok(())
    };
    if texts.is_empty() {
        for line in std::io::stdin().lock().lines() {
            run(&line.map_err(|e| CliError::data(format!("stdin: {e}")))?)?;
        }
    } else {
        for text in texts {
            run(text)?;
        }
    }
    Ok(())
}
