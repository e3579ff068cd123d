use hatemask_nn::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MaskerModel;
use crate::corpus::{validate_pair, ParallelPair};
use crate::error::{ModelError, Result};
use crate::metrics::{bleu, BleuReport};
use crate::text::{decode, encode, END_ID, PAD_ID, START_ID, UNK_ID};

const DECODE_CHUNK: usize = 64;

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated ids, excluding the leading START and any END.
    pub ids: Vec<usize>,
    /// Generated tokens with specials removed, space-joined.
    pub text: String,
    /// Number of UNK tokens generated.
    pub unk: usize,
}

/// Greedy decoding of one source sentence.
pub fn greedy_decode(model: &MaskerModel, source: &str, max_len: usize) -> Result<Decoded> {
    Ok(greedy_decode_batch(model, &[source], max_len)?.remove(0))
}

/// Greedy decoding of many sentences. Generation stops at END or after
/// `max_len` tokens, capped at the model's sequence length.
pub fn greedy_decode_batch<S: AsRef<str>>(model: &MaskerModel, sources: &[S], max_len: usize) -> Result<Vec<Decoded>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_CHUNK) {
        out.extend(decode_chunk(model, chunk, max_len)?);
    }
    Ok(out)
}

fn decode_chunk<S: AsRef<str>>(model: &MaskerModel, sources: &[S], max_len: usize) -> Result<Vec<Decoded>> {
    let l = model.config().seq_len;
    let steps = max_len.min(l);
    let batch = sources.len();
    let source: Vec<usize> = sources.iter().flat_map(|s| encode(s.as_ref(), model.source_vocab(), l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g0 = Graph::new();
    let memory = model.encode(&mut g0, &source, false, &mut rng)?;
    let memory = g0.value(memory).clone();

    let mut generated: Vec<Vec<usize>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    let mut input = vec![PAD_ID; batch * l];
    for b in 0..batch {
        input[b * l] = START_ID;
    }
    for t in 0..steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let mut g = Graph::new();
        let mem = g.constant(memory.clone());
        let logits = model.decode(&mut g, mem, &source, &input, false, &mut rng)?;
        let logits = g.value(logits);
        for b in 0..batch {
            if done[b] {
                continue;
            }
            let next = argmax(logits.row(b * l + t));
            if next == END_ID {
                done[b] = true;
                continue;
            }
            generated[b].push(next);
            if t + 1 < l {
                input[b * l + t + 1] = next;
            }
        }
    }
    generated
        .into_iter()
        .map(|ids| {
            let text = decode(&ids, model.target_vocab())?;
            let unk = ids.iter().filter(|&&i| i == UNK_ID).count();
            Ok(Decoded { ids, text, unk })
        })
        .collect()
}

/// Flags a decoded sentence that is not the source with some tokens replaced
/// by star runs of matching length. Returns the violation message, if any.
pub fn star_run_lint(source: &str, decoded: &str) -> Option<String> {
    validate_pair(&ParallelPair::new(source, decoded)).err().map(|v| v.to_string())
}

/// BLEU of greedy decodes against references, in the column layout of the
/// vocabulary-size tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskerReport {
    /// Pairs in the dataset the report describes.
    pub ds_size: usize,
    /// How many of those pairs have nothing masked.
    pub not_hs_size: usize,
    pub vocab_size: usize,
    pub unk: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    /// Fraction of decodes identical to their reference.
    pub exact_match: f64,
    pub detail: BleuReport,
}

/// Decodes every source and scores the outputs with corpus BLEU.
/// `ds_size` and `not_hs_size` describe `pairs`; `vocab_size` is the
/// target vocabulary bound.
pub fn evaluate_masker(model: &MaskerModel, pairs: &[ParallelPair]) -> Result<MaskerReport> {
    if pairs.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let sources: Vec<&str> = pairs.iter().map(|p| p.source.as_str()).collect();
    let decoded = greedy_decode_batch(model, &sources, model.config().seq_len)?;
    let candidates: Vec<&str> = decoded.iter().map(|d| d.text.as_str()).collect();
    let references: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
    let detail = bleu(&candidates, &references)?;
    let exact = candidates.iter().zip(&references).filter(|(c, r)| c.split_whitespace().eq(r.split_whitespace())).count();
    Ok(MaskerReport {
        ds_size: pairs.len(),
        not_hs_size: pairs.iter().filter(|p| p.source == p.target).count(),
        vocab_size: model.config().target_vocab_size,
        unk: decoded.iter().map(|d| d.unk).sum(),
        bleu1: detail.bleu1,
        bleu2: detail.bleu2,
        bleu3: detail.bleu3,
        bleu4: detail.bleu4,
        exact_match: exact as f64 / pairs.len() as f64,
        detail,
    })
}

impl MaskerReport {
    /// One table row: vocabulary size, UNK count and BLEU-1..4.
    pub fn row(&self) -> String {
        use crate::metrics::fmt2;
        format!(
            "{:>10}{:>8}{:>8}{:>8}{:>8}{:>8}",
            self.vocab_size,
            self.unk,
            fmt2(self.bleu1),
            fmt2(self.bleu2),
            fmt2(self.bleu3),
            fmt2(self.bleu4)
        )
    }

    pub fn scores_in_range(&self) -> bool {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.exact_match].iter().all(|s| (0.0..=1.0).contains(s))
    }

    pub fn header() -> String {
        format!("{:>10}{:>8}{:>8}{:>8}{:>8}{:>8}", "Vocab", "UNK", "BLEU 1", "BLEU 2", "BLEU 3", "BLEU 4")
    }
}
