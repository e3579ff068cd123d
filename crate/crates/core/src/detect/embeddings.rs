use std::collections::HashMap;
use std::path::Path;

use hatemask_nn::init::normal;
use hatemask_nn::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::text::{Vocabulary, PAD_ID};

/// Standard deviation of rows for words missing from the pretrained file.
pub const OOV_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCoverage {
    /// Non-special vocabulary words found in the file.
    pub found: usize,
    /// Non-special vocabulary words overall.
    pub total: usize,
}

impl EmbeddingCoverage {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

/// Parses word2vec text format (`word v1 ... vd` per line, optional
/// `count dim` header) into a word map. Every vector must have `dim` values.
pub fn parse_word2vec(contents: &str, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let mut vectors = HashMap::new();
    for (i, line) in contents.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            let file_dim: usize = values[0].parse().expect("checked");
            if file_dim != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, found: file_dim });
            }
            continue;
        }
        if values.len() != dim {
            return Err(ModelError::DimensionMismatch { expected: dim, found: values.len() });
        }
        let row = values
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| ModelError::Format { what: "embedding file", message: format!("line {}: bad number", i + 1) })?;
        vectors.insert(word.to_string(), row);
    }
    Ok(vectors)
}

/// Builds a `[vocab x dim]` table: rows of words present in the file are
/// copied, all others drawn from N(0, 0.01²), and the padding row is zero.
pub fn load_pretrained_embeddings<R: Rng>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<(Tensor, EmbeddingCoverage)> {
    let path = path.as_ref();
    let contents =
        std::fs::read_to_string(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
    let vectors = parse_word2vec(&contents, dim)?;
    let mut table = normal(&[vocab.len(), dim], OOV_INIT_STD, rng);
    table.data_mut()[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
    let mut found = 0;
    for (id, word) in vocab.tokens().iter().enumerate().skip(vocab.specials_len()) {
        if let Some(row) = vectors.get(word) {
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(row);
            found += 1;
        }
    }
    let total = vocab.len() - vocab.specials_len();
    Ok((table, EmbeddingCoverage { found, total }))
}
