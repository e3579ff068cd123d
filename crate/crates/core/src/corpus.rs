//! Labeled and parallel corpora, splits, the lexicon masking oracle and
//! synthetic data generation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{preprocess, NormalizationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "OFF")]
    Offensive,
    #[serde(rename = "NOT")]
    NotOffensive,
}

impl Label {
    pub fn code(self) -> &'static str {
        match self {
            Label::Offensive => "OFF",
            Label::NotOffensive => "NOT",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "OFF" => Some(Label::Offensive),
            "NOT" => Some(Label::NotOffensive),
            _ => None,
        }
    }

    pub fn is_offensive(self) -> bool {
        self == Label::Offensive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

impl ParallelPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self { source: source.into(), target: target.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBundle<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSpec {
    /// The 7000/1000/2000 layout of the OffensEval-2020 Arabic release.
    pub const OFFENSEVAL: SplitSpec = SplitSpec { train: 7000, dev: 1000, test: 2000 };

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// First broken invariant of a parallel pair.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairViolation {
    #[error("source has {source_tokens} tokens but target has {target_tokens}")]
    TokenCount { source_tokens: usize, target_tokens: usize },
    #[error("token {position}: expected {expected} stars, found {found}")]
    StarRunLength { position: usize, expected: usize, found: usize },
    #[error("token {position}: target {target:?} matches neither the source token nor a star run")]
    TokenMismatch { position: usize, target: String },
}

fn join_lines(errors: &[LineError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{} malformed line(s): {}", .0.len(), join_lines(.0))]
    Format(Vec<LineError>),
    #[error("{} invalid pair(s): {}", .0.len(), join_lines(.0))]
    PairInvariantViolation(Vec<LineError>),
    #[error("requested {requested} examples but only {available} are available")]
    InsufficientData { requested: usize, available: usize },
    #[error("invalid size: {0}")]
    InvalidSize(&'static str),
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::FileNotFound(path.to_path_buf()),
        _ => CorpusError::Io { path: path.to_path_buf(), source: e },
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CorpusError> {
    fs::write(path, contents).map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })
}

/// Replaces raw tabs and line breaks with spaces so a field fits one TSV cell.
pub fn sanitize_field(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

pub fn parse_labeled_tsv(contents: &str) -> Result<Vec<LabeledExample>, CorpusError> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| LineError { line: i + 1, message };
        match fields.as_slice() {
            [id, text, label] => match Label::from_code(label) {
                Some(label) => out.push(LabeledExample { id: id.to_string(), text: text.to_string(), label }),
                None => errors.push(err(format!("unknown label {label:?}"))),
            },
            _ => errors.push(err(format!("expected 3 tab-separated fields, found {}", fields.len()))),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(CorpusError::Format(errors))
    }
}

/// Reads `id<TAB>text<TAB>OFF|NOT` lines. Every malformed line is reported.
pub fn load_labeled_tsv(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>, CorpusError> {
    parse_labeled_tsv(&read_file(path.as_ref())?)
}

pub fn labeled_to_tsv(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&format!("{}\t{}\t{}\n", sanitize_field(&ex.id), sanitize_field(&ex.text), ex.label));
    }
    out
}

pub fn write_labeled_tsv(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<(), CorpusError> {
    write_file(path.as_ref(), &labeled_to_tsv(examples))
}

/// Preprocesses every text and drops examples that end up empty, returning
/// the number dropped.
pub fn preprocess_examples(examples: &[LabeledExample], cfg: &NormalizationConfig) -> (Vec<LabeledExample>, usize) {
    let mut kept = Vec::with_capacity(examples.len());
    for ex in examples {
        let text = preprocess(&ex.text, cfg);
        if !text.is_empty() {
            kept.push(LabeledExample { text, ..ex.clone() });
        }
    }
    let dropped = examples.len() - kept.len();
    (kept, dropped)
}

pub fn parse_parallel(contents: &str) -> Result<Vec<ParallelPair>, CorpusError> {
    let mut out = Vec::new();
    let mut format = Vec::new();
    let mut invalid = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        let Some((source, target)) = line.split_once('\t').filter(|(_, t)| !t.contains('\t')) else {
            format.push(LineError { line: i + 1, message: "expected 2 tab-separated fields".into() });
            continue;
        };
        let pair = ParallelPair::new(source, target);
        match validate_pair(&pair) {
            Ok(()) => out.push(pair),
            Err(v) => invalid.push(LineError { line: i + 1, message: v.to_string() }),
        }
    }
    if !format.is_empty() {
        return Err(CorpusError::Format(format));
    }
    if !invalid.is_empty() {
        return Err(CorpusError::PairInvariantViolation(invalid));
    }
    Ok(out)
}

/// Reads `source<TAB>target` lines, validating every pair.
pub fn load_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>, CorpusError> {
    parse_parallel(&read_file(path.as_ref())?)
}

pub fn parallel_to_tsv(pairs: &[ParallelPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\n", sanitize_field(&p.source), sanitize_field(&p.target)));
    }
    out
}

pub fn write_parallel(path: impl AsRef<Path>, pairs: &[ParallelPair]) -> Result<(), CorpusError> {
    write_file(path.as_ref(), &parallel_to_tsv(pairs))
}

fn is_star_run(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c == '*')
}

/// Number of Unicode scalar values in a token; the star-run length it masks to.
pub fn letter_count(token: &str) -> usize {
    token.chars().count()
}

/// Checks that the target keeps every source token or replaces it with a star
/// run of equal letter count.
pub fn validate_pair(pair: &ParallelPair) -> Result<(), PairViolation> {
    let src: Vec<&str> = pair.source.split_whitespace().collect();
    let tgt: Vec<&str> = pair.target.split_whitespace().collect();
    if src.len() != tgt.len() {
        return Err(PairViolation::TokenCount { source_tokens: src.len(), target_tokens: tgt.len() });
    }
    for (position, (s, t)) in src.iter().zip(&tgt).enumerate() {
        if s == t {
            continue;
        }
        if is_star_run(t) {
            let expected = letter_count(s);
            let found = letter_count(t);
            if expected != found {
                return Err(PairViolation::StarRunLength { position, expected, found });
            }
        } else {
            return Err(PairViolation::TokenMismatch { position, target: t.to_string() });
        }
    }
    Ok(())
}

/// Offensive words with a category tag, stored in normalised form.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the normalised form of `word`. Returns false when the word
    /// normalises to nothing.
    pub fn insert(&mut self, word: &str, category: &str) -> bool {
        let key = preprocess(word, &NormalizationConfig::default());
        if key.is_empty() {
            return false;
        }
        for part in key.split_whitespace() {
            self.entries.insert(part.to_string(), category.to_string());
        }
        true
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut lex = Self::new();
        for w in words {
            lex.insert(w, "offensive");
        }
        lex
    }

    /// Looks up a token after normalising it.
    pub fn contains(&self, token: &str) -> bool {
        if self.entries.contains_key(token) {
            return true;
        }
        let key = preprocess(token, &NormalizationConfig::default());
        !key.is_empty() && self.entries.contains_key(&key)
    }

    pub fn category(&self, word: &str) -> Option<&str> {
        self.entries.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parse(contents: &str) -> Result<Self, CorpusError> {
        let mut lex = Self::new();
        let mut errors = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            match line.split_once('\t') {
                Some((word, category)) if !category.contains('\t') => {
                    if !lex.insert(word, category) {
                        errors.push(LineError { line: i + 1, message: format!("{word:?} normalises to nothing") });
                    }
                }
                _ => errors.push(LineError { line: i + 1, message: "expected `word<TAB>category`".into() }),
            }
        }
        if errors.is_empty() {
            Ok(lex)
        } else {
            Err(CorpusError::Format(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::parse(&read_file(path.as_ref())?)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(w, c)| format!("{w}\t{c}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        write_file(path.as_ref(), &self.to_tsv())
    }
}

/// Rule-based masker: every lexicon token becomes a star run of its letter count.
pub fn mask_with_lexicon(text: &str, lexicon: &Lexicon) -> String {
    text.split_whitespace()
        .map(|tok| if lexicon.contains(tok) { "*".repeat(letter_count(tok)) } else { tok.to_string() })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Seeded shuffle followed by consecutive train, dev and test slices.
pub fn split_dataset<T: Clone>(examples: &[T], spec: SplitSpec, seed: u64) -> Result<DatasetBundle<T>, CorpusError> {
    if spec.total() > examples.len() {
        return Err(CorpusError::InsufficientData { requested: spec.total(), available: examples.len() });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| examples[i].clone()).collect();
    let (a, b) = (spec.train, spec.train + spec.dev);
    Ok(DatasetBundle {
        train: take(0..a),
        dev: take(a..b),
        test: take(b..spec.total()),
        provenance: format!("split seed={seed} train={} dev={} test={}", spec.train, spec.dev, spec.test),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub offensive: usize,
    pub not_offensive: usize,
}

impl ClassCounts {
    pub fn of(examples: &[LabeledExample]) -> Self {
        let offensive = examples.iter().filter(|e| e.label.is_offensive()).count();
        Self { offensive, not_offensive: examples.len() - offensive }
    }

    pub fn total(&self) -> usize {
        self.offensive + self.not_offensive
    }

    /// Majority over minority class size; `None` when a class is absent.
    pub fn imbalance_ratio(&self) -> Option<f64> {
        let (lo, hi) = (self.offensive.min(self.not_offensive), self.offensive.max(self.not_offensive));
        (lo > 0).then(|| hi as f64 / lo as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub train: ClassCounts,
    pub dev: ClassCounts,
    pub test: ClassCounts,
}

impl ClassDistribution {
    /// True when any non-empty split has a majority class at least twice
    /// the size of the minority class.
    pub fn is_imbalanced(&self) -> bool {
        [self.train, self.dev, self.test]
            .iter()
            .filter(|c| c.total() > 0)
            .any(|c| c.imbalance_ratio().map_or(true, |r| r >= 2.0))
    }
}

pub fn class_distribution(bundle: &DatasetBundle<LabeledExample>) -> ClassDistribution {
    ClassDistribution {
        train: ClassCounts::of(&bundle.train),
        dev: ClassCounts::of(&bundle.dev),
        test: ClassCounts::of(&bundle.test),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub labeled: DatasetBundle<LabeledExample>,
    pub parallel: DatasetBundle<ParallelPair>,
    pub lexicon: Lexicon,
}

impl SyntheticCorpus {
    pub fn all_labeled(&self) -> Vec<LabeledExample> {
        [&self.labeled.train, &self.labeled.dev, &self.labeled.test].into_iter().flatten().cloned().collect()
    }

    pub fn all_pairs(&self) -> Vec<ParallelPair> {
        [&self.parallel.train, &self.parallel.dev, &self.parallel.test].into_iter().flatten().cloned().collect()
    }
}

fn slice_bundle<T: Clone>(items: &[T], spec: SplitSpec, provenance: &str) -> DatasetBundle<T> {
    let (a, b) = (spec.train, spec.train + spec.dev);
    DatasetBundle {
        train: items[..a].to_vec(),
        dev: items[a..b].to_vec(),
        test: items[b..].to_vec(),
        provenance: provenance.to_string(),
    }
}

/// Letters that survive normalisation unchanged.
const SYNTHETIC_LETTERS: &str = "ابتثجحخدذرزسشصضطظعغفقكلمنهوي";

fn random_word(rng: &mut ChaCha8Rng, letters: &[char]) -> String {
    let len = rng.gen_range(2..=5);
    let mut word = String::new();
    let mut prev = None;
    while word.chars().count() < len {
        let c = letters[rng.gen_range(0..letters.len())];
        if Some(c) != prev {
            word.push(c);
            prev = Some(c);
        }
    }
    word
}

fn distinct_words(rng: &mut ChaCha8Rng, letters: &[char], n: usize, seen: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = random_word(rng, letters);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Random sentences over synthetic Arabic words. About half contain one or
/// two lexicon words and are labeled Offensive; parallel targets come from
/// [`mask_with_lexicon`]. Splits are 80/10/10.
pub fn generate_synthetic_corpus(
    n: usize,
    lexicon_size: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<SyntheticCorpus, CorpusError> {
    if n == 0 || lexicon_size == 0 || vocab_size == 0 {
        return Err(CorpusError::InvalidSize("n, lexicon_size and vocab_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = SYNTHETIC_LETTERS.chars().collect();
    let mut seen = HashSet::new();
    let bad = distinct_words(&mut rng, &letters, lexicon_size, &mut seen);
    let clean = distinct_words(&mut rng, &letters, vocab_size, &mut seen);
    let lexicon = Lexicon::from_words(bad.iter().map(String::as_str));

    let mut labeled = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(3..=8);
        let mut words: Vec<&str> = (0..len).map(|_| clean[rng.gen_range(0..clean.len())].as_str()).collect();
        if rng.gen_bool(0.5) {
            for _ in 0..rng.gen_range(1..=2) {
                let pos = rng.gen_range(0..words.len());
                words[pos] = bad[rng.gen_range(0..bad.len())].as_str();
            }
        }
        let text = words.join(" ");
        let label = if words.iter().any(|w| lexicon.contains(w)) { Label::Offensive } else { Label::NotOffensive };
        pairs.push(ParallelPair::new(text.clone(), mask_with_lexicon(&text, &lexicon)));
        labeled.push(LabeledExample { id: format!("syn-{i}"), text, label });
    }

    let dev = n / 10;
    let spec = SplitSpec { train: n - 2 * dev, dev, test: dev };
    let provenance = format!("synthetic n={n} lexicon={lexicon_size} vocab={vocab_size} seed={seed}");
    Ok(SyntheticCorpus {
        labeled: slice_bundle(&labeled, spec, &provenance),
        parallel: slice_bundle(&pairs, spec, &provenance),
        lexicon,
    })
}
