//! Loading, cleaning and splitting the corpus a run configuration points at.

use std::path::Path;

use hatemask_core::corpus::{
    generate_synthetic_corpus, labeled_to_tsv, load_labeled_tsv, load_parallel, mask_with_lexicon, parallel_to_tsv,
    preprocess_examples, split_dataset, validate_pair, DatasetBundle, LabeledExample, Lexicon, ParallelPair,
    SplitSpec,
};
use hatemask_core::text::{preprocess, NormalizationConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{CorpusFormat, DataSection};
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub corpus_sha256: String,
    pub loaded: usize,
    pub dropped: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// A split corpus with the summary that goes into reports.
pub struct Loaded<T> {
    pub bundle: DatasetBundle<T>,
    pub summary: DataSummary,
}

/// 70/10/20 of whatever survived cleaning.
fn default_split(n: usize) -> SplitSpec {
    let train = n * 7 / 10;
    let dev = n / 10;
    SplitSpec { train, dev, test: n - train - dev }
}

fn finish<T: Clone>(
    items: Vec<T>,
    presplit: Option<DatasetBundle<T>>,
    data: &DataSection,
    seed: u64,
    corpus_sha256: String,
    loaded: usize,
    dropped: usize,
) -> Result<Loaded<T>, CliError> {
    let bundle = match (presplit, data.split) {
        (Some(bundle), None) => bundle,
        (_, split) => split_dataset(&items, split.unwrap_or_else(|| default_split(items.len())), seed)?,
    };
    let summary = DataSummary {
        corpus_sha256,
        loaded,
        dropped,
        train: bundle.train.len(),
        dev: bundle.dev.len(),
        test: bundle.test.len(),
    };
    Ok(Loaded { bundle, summary })
}

pub fn load_detect_data(data: &DataSection, seed: u64) -> Result<Loaded<LabeledExample>, CliError> {
    if let Some(spec) = data.synthetic {
        let corpus = generate_synthetic_corpus(spec.n, spec.lexicon_size, spec.vocab_size, seed)?;
        let all = corpus.all_labeled();
        let hash = sha256_hex(labeled_to_tsv(&all).as_bytes());
        let n = all.len();
        return finish(all, Some(corpus.labeled), data, seed, hash, n, 0);
    }
    let path = data.corpus.as_deref().expect("validated config has a corpus");
    let hash = file_sha256(path)?;
    let raw = load_labeled_tsv(path)?;
    let (examples, dropped) =
        if data.preprocess { preprocess_examples(&raw, &data.normalization) } else { (raw.clone(), 0) };
    finish(examples, None, data, seed, hash, raw.len(), dropped)
}

/// Cleans both sides of a pair, keeping it only if it is still a valid pair.
fn clean_pair(pair: &ParallelPair, source_cfg: &NormalizationConfig, target_cfg: &NormalizationConfig) -> Option<ParallelPair> {
    let cleaned = ParallelPair::new(preprocess(&pair.source, source_cfg), preprocess(&pair.target, target_cfg));
    (!cleaned.source.is_empty() && validate_pair(&cleaned).is_ok()).then_some(cleaned)
}

pub fn target_normalization(source: &NormalizationConfig) -> NormalizationConfig {
    NormalizationConfig { preserve_star_runs: true, ..source.clone() }
}

pub fn load_mask_data(data: &DataSection, seed: u64) -> Result<Loaded<ParallelPair>, CliError> {
    if let Some(spec) = data.synthetic {
        let corpus = generate_synthetic_corpus(spec.n, spec.lexicon_size, spec.vocab_size, seed)?;
        let all = corpus.all_pairs();
        let hash = sha256_hex(parallel_to_tsv(&all).as_bytes());
        let n = all.len();
        return finish(all, Some(corpus.parallel), data, seed, hash, n, 0);
    }
    let path = data.corpus.as_deref().expect("validated config has a corpus");
    let hash = file_sha256(path)?;
    let target_cfg = target_normalization(&data.normalization);
    let (raw_len, pairs) = match data.format {
        CorpusFormat::Parallel => {
            let raw = load_parallel(path)?;
            let pairs: Vec<ParallelPair> = if data.preprocess {
                raw.iter().filter_map(|p| clean_pair(p, &data.normalization, &target_cfg)).collect()
            } else {
                raw.clone()
            };
            (raw.len(), pairs)
        }
        CorpusFormat::Labeled => {
            let lexicon_path = data.lexicon.as_deref().expect("validated config has a lexicon");
            let lexicon = Lexicon::load(lexicon_path)?;
            let raw = load_labeled_tsv(path)?;
            let (examples, _) =
                if data.preprocess { preprocess_examples(&raw, &data.normalization) } else { (raw.clone(), 0) };
            let pairs = examples.iter().map(|e| ParallelPair::new(&e.text, mask_with_lexicon(&e.text, &lexicon))).collect();
            (raw.len(), pairs)
        }
    };
    let dropped = raw_len - pairs.len();
    finish(pairs, None, data, seed, hash, raw_len, dropped)
}

/// Pairs that mask nothing: the not-hate sentences of a parallel corpus.
pub fn not_hate_count(pairs: &[ParallelPair]) -> usize {
    pairs.iter().filter(|p| p.source == p.target).count()
}

pub fn all_items<T: Clone>(bundle: &DatasetBundle<T>) -> Vec<T> {
    [&bundle.train, &bundle.dev, &bundle.test].into_iter().flatten().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_covers_every_example() {
        for n in [0, 1, 9, 10, 37, 10_000] {
            let s = default_split(n);
            assert_eq!(s.total(), n);
            assert_eq!(s.train, n * 7 / 10);
        }
    }

    #[test]
    fn sha256_matches_known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn cleaning_keeps_stars_on_the_target_side() {
        let src = NormalizationConfig::default();
        let tgt = target_normalization(&src);
        let pair = ParallelPair::new("انت كلب!", "انت *** !");
        let cleaned = clean_pair(&pair, &src, &tgt).unwrap();
        assert_eq!(cleaned.source, "انت كلب !");
        assert_eq!(cleaned.target, "انت *** !");
    }
}
