//! Classification metrics and corpus BLEU.

use std::collections::HashMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::text::UNK;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
}

/// Confusion counts with Offensive as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with NotOffensive as the positive class.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }
}

pub fn confusion(preds: &[Label], golds: &[Label]) -> Result<ConfusionCounts, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { left: preds.len(), right: golds.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        match (p.is_offensive(), g.is_offensive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

type Q = Ratio<u64>;

fn ratio_or_zero(num: u64, den: u64) -> Q {
    if den == 0 {
        Q::from_integer(0)
    } else {
        Q::new(num, den)
    }
}

/// Exact precision, recall and F1 for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactClassMetrics {
    pub precision: Q,
    pub recall: Q,
    pub f1: Q,
}

impl ExactClassMetrics {
    fn from_counts(c: &ConfusionCounts) -> Self {
        Self {
            precision: ratio_or_zero(c.tp, c.tp + c.fp),
            recall: ratio_or_zero(c.tp, c.tp + c.fn_),
            // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn), which is 0 exactly when P+R is 0.
            f1: ratio_or_zero(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        }
    }

    fn to_f64(self) -> ClassMetrics {
        ClassMetrics { precision: q_to_f64(self.precision), recall: q_to_f64(self.recall), f1: q_to_f64(self.f1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactPrf1 {
    pub offensive: ExactClassMetrics,
    pub not_offensive: ExactClassMetrics,
    pub macro_avg: ExactClassMetrics,
    pub accuracy: Q,
}

fn q_to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Per-class and macro metrics in exact rational arithmetic. Zero
/// denominators yield 0.
pub fn prf1(counts: &ConfusionCounts) -> ExactPrf1 {
    let off = ExactClassMetrics::from_counts(counts);
    let not = ExactClassMetrics::from_counts(&counts.swapped());
    let half = Q::new(1, 2);
    ExactPrf1 {
        offensive: off,
        not_offensive: not,
        macro_avg: ExactClassMetrics {
            precision: (off.precision + not.precision) * half,
            recall: (off.recall + not.recall) * half,
            f1: (off.f1 + not.f1) * half,
        },
        accuracy: ratio_or_zero(counts.tp + counts.tn, counts.total()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification report laid out as P/R/F1 per class, macro average and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub offensive: ClassMetrics,
    pub not_offensive: ClassMetrics,
    pub macro_avg: ClassMetrics,
    pub accuracy: f64,
    pub confusion: ConfusionCounts,
}

impl EvalReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let exact = prf1(&counts);
        Self {
            offensive: exact.offensive.to_f64(),
            not_offensive: exact.not_offensive.to_f64(),
            macro_avg: exact.macro_avg.to_f64(),
            accuracy: q_to_f64(exact.accuracy),
            confusion: counts,
        }
    }

    pub fn from_labels(preds: &[Label], golds: &[Label]) -> Result<Self, MetricsError> {
        Ok(Self::from_counts(confusion(preds, golds)?))
    }

    /// Plain-text table with P, R, F1 and A columns, values rounded to two decimals.
    pub fn table(&self) -> String {
        let row = |name: &str, m: &ClassMetrics| {
            format!("{name:<16}{:>6}{:>6}{:>6}\n", fmt2(m.precision), fmt2(m.recall), fmt2(m.f1))
        };
        let mut out = format!("{:<16}{:>6}{:>6}{:>6}{:>6}\n", "", "P", "R", "F1", "A");
        out += &row("Offensive", &self.offensive);
        out += &row("Not offensive", &self.not_offensive);
        out += row("Macro Avg", &self.macro_avg).trim_end();
        out += &format!("{:>6}\n", fmt2(self.accuracy));
        out
    }
}

/// Rounds half to even at two decimals, for display only.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}

pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

/// Clipped n-gram matches over total candidate n-grams, kept unreduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramPrecision {
    pub clipped: u64,
    pub total: u64,
}

impl NgramPrecision {
    /// Exact value; `None` when the candidates contain no n-grams of this order.
    pub fn ratio(&self) -> Option<Ratio<u64>> {
        (self.total > 0).then(|| Ratio::new(self.clipped, self.total))
    }

    /// An order with no candidate n-grams at all counts as vacuously precise.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn tokenize<S: AsRef<str>>(corpus: &[S]) -> Vec<Vec<&str>> {
    corpus.iter().map(|s| s.as_ref().split_whitespace().collect()).collect()
}

fn check_aligned(c: usize, r: usize) -> Result<(), MetricsError> {
    if c != r {
        return Err(MetricsError::LengthMismatch { left: c, right: r });
    }
    if c == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn precision_tokens(cands: &[Vec<&str>], refs: &[Vec<&str>], n: usize) -> NgramPrecision {
    let mut p = NgramPrecision { clipped: 0, total: 0 };
    for (c, r) in cands.iter().zip(refs) {
        let rc = ngram_counts(r, n);
        for (gram, count) in ngram_counts(c, n) {
            p.clipped += count.min(rc.get(gram).copied().unwrap_or(0));
            p.total += count;
        }
    }
    p
}

/// Corpus-level modified n-gram precision with one reference per candidate.
pub fn modified_ngram_precision<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[R],
    n: usize,
) -> Result<NgramPrecision, MetricsError> {
    check_aligned(candidates.len(), references.len())?;
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    Ok(precision_tokens(&tokenize(candidates), &tokenize(references), n))
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub precisions: [NgramPrecision; 4],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub unk: usize,
}

impl BleuReport {
    pub fn scores(&self) -> [f64; 4] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4]
    }
}

/// Unsmoothed corpus BLEU-1..4 with uniform cumulative weights.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<BleuReport, MetricsError> {
    bleu_with_smoothing(candidates, references, None)
}

/// [`bleu`] with an optional epsilon added to zero clipped counts, for
/// sentence-level diagnostics.
pub fn bleu_with_smoothing<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[R],
    epsilon: Option<f64>,
) -> Result<BleuReport, MetricsError> {
    check_aligned(candidates.len(), references.len())?;
    let cands = tokenize(candidates);
    let refs = tokenize(references);
    let candidate_length: usize = cands.iter().map(Vec::len).sum();
    let reference_length: usize = refs.iter().map(Vec::len).sum();
    let unk = cands.iter().flatten().filter(|t| **t == UNK).count();
    let precisions: [NgramPrecision; 4] = std::array::from_fn(|i| precision_tokens(&cands, &refs, i + 1));
    let bp = brevity_penalty(candidate_length, reference_length);
    let mut scores = [0.0; 4];
    let mut log_sum = 0.0;
    let mut zero = false;
    for (k, p) in precisions.iter().enumerate() {
        let value = match (p.clipped, epsilon) {
            (0, Some(eps)) if p.total > 0 => eps / p.total as f64,
            _ => p.value(),
        };
        if value == 0.0 {
            zero = true;
        } else {
            log_sum += value.ln();
        }
        let n = (k + 1) as f64;
        scores[k] = if zero || bp == 0.0 { 0.0 } else { bp * (log_sum / n).exp() };
    }
    Ok(BleuReport {
        bleu1: scores[0],
        bleu2: scores[1],
        bleu3: scores[2],
        bleu4: scores[3],
        precisions,
        brevity_penalty: bp,
        candidate_length,
        reference_length,
        unk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{NotOffensive as NOT, Offensive as OFF};

    #[test]
    fn confusion_cases() {
        assert_eq!(confusion(&[OFF], &[OFF]).unwrap(), ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 0 });
        assert_eq!(confusion(&[OFF, NOT], &[NOT, OFF]).unwrap(), ConfusionCounts { tp: 0, fp: 1, fn_: 1, tn: 0 });
        assert_eq!(confusion(&[OFF], &[]), Err(MetricsError::LengthMismatch { left: 1, right: 0 }));
        assert_eq!(confusion(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn balanced_counts_give_half() {
        let r = prf1(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let half = Q::new(1, 2);
        for m in [r.offensive, r.not_offensive, r.macro_avg] {
            assert_eq!((m.precision, m.recall, m.f1), (half, half, half));
        }
        assert_eq!(r.accuracy, half);
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = EvalReport::from_labels(&[OFF, NOT, NOT], &[OFF, NOT, NOT]).unwrap();
        assert_eq!((r.macro_avg.f1, r.accuracy), (1.0, 1.0));
        let r = prf1(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 5 });
        assert_eq!(r.offensive.precision, Q::from_integer(0));
        assert_eq!(r.offensive.f1, Q::from_integer(0));
    }

    #[test]
    fn majority_baseline_accuracy() {
        let golds: Vec<Label> = (0..2000).map(|i| if i < 402 { OFF } else { NOT }).collect();
        let r = EvalReport::from_labels(&vec![NOT; 2000], &golds).unwrap();
        assert_eq!(r.accuracy, 0.799);
        assert_eq!(r.offensive.f1, 0.0);
    }

    #[test]
    fn table_layout() {
        let t = EvalReport::from_counts(ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 }).table();
        assert!(t.contains("Macro Avg"));
        assert!(t.lines().next().unwrap().trim_start().starts_with("P"));
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(round2(0.125), 0.12);
        assert_eq!(round2(0.375), 0.38);
    }

    #[test]
    fn clipped_unigrams() {
        let p = modified_ngram_precision(&["the the the the the the the"], &["the cat is on the mat"], 1).unwrap();
        assert_eq!(p.ratio(), Some(Ratio::new(2, 7)));
        let p = modified_ngram_precision(&["a b"], &["c d"], 1).unwrap();
        assert_eq!(p.value(), 0.0);
        assert_eq!(modified_ngram_precision(&["a"], &["a"], 0), Err(MetricsError::ZeroOrder));
    }

    #[test]
    fn brevity() {
        assert_eq!(brevity_penalty(10, 10), 1.0);
        assert!((brevity_penalty(5, 10) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(12, 10), 1.0);
        assert_eq!(brevity_penalty(0, 3), 0.0);
    }

    #[test]
    fn bleu_cases() {
        let c = ["a b c d e", "x y z"];
        assert_eq!(bleu(&c, &c).unwrap().scores(), [1.0; 4]);
        let r = bleu(&["a b c d"], &["a b c d e"]).unwrap();
        for s in r.scores() {
            assert!((s - (-0.25f64).exp()).abs() < 1e-12);
        }
        let r = bleu(&["a b c d"], &["a b x d"]).unwrap();
        assert!(r.bleu1 > 0.0 && r.bleu2 > 0.0);
        assert_eq!((r.bleu3, r.bleu4), (0.0, 0.0));
        let smoothed = bleu_with_smoothing(&["a b c d"], &["a b x d"], Some(0.1)).unwrap();
        assert!(smoothed.bleu4 > 0.0);
        assert_eq!(bleu::<&str, &str>(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn unk_tokens_are_counted() {
        assert_eq!(bleu(&["[UNK] a [UNK]"], &["b a c"]).unwrap().unk, 2);
    }
}
