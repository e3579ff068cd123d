use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TextError;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const START: &str = "[start]";
pub const END: &str = "[end]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const END_ID: usize = 3;
pub const SPECIALS: [&str; 4] = [PAD, UNK, START, END];
/// Specials of a source-side vocabulary, which never needs sequence markers.
pub const SOURCE_SPECIALS: [&str; 2] = [PAD, UNK];

/// Token to id bijection. PAD and UNK are always ids 0 and 1. Target-side
/// vocabularies also hold START and END at ids 2 and 3; source-side ones
/// start their words at id 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    markers: bool,
}

impl Vocabulary {
    /// Builds a vocabulary from a full token list that starts with the
    /// specials of either kind.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        let starts_with = |specials: &[&str]| tokens.len() >= specials.len() && tokens.iter().zip(specials).all(|(t, s)| t == s);
        if !starts_with(&SOURCE_SPECIALS) {
            return Err(TextError::BadVocabFile(format!("first entries must be {SOURCE_SPECIALS:?}")));
        }
        let markers = starts_with(&SPECIALS);
        if !markers && tokens.iter().any(|t| t == START || t == END) {
            return Err(TextError::BadVocabFile(format!("{START} and {END} must be ids 2 and 3")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TextError::BadVocabFile(format!("line {}: invalid token {tok:?}", id + 1)));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(TextError::BadVocabFile(format!("line {}: duplicate token {tok:?}", id + 1)));
            }
        }
        Ok(Self { tokens, index, markers })
    }

    fn build<I, S>(specials: &[&str], words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) && !SPECIALS.contains(&w.as_str()) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, index, markers: specials.len() == SPECIALS.len() }
    }

    /// Target-side vocabulary: all four specials followed by `words` in the
    /// given order. Duplicates and special strings are skipped.
    pub fn with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::build(&SPECIALS, words)
    }

    /// Source-side vocabulary: PAD and UNK followed by `words`.
    pub fn source_with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::build(&SOURCE_SPECIALS, words)
    }

    /// Whether START and END are present.
    pub fn has_markers(&self) -> bool {
        self.markers
    }

    pub fn specials_len(&self) -> usize {
        if self.markers {
            SPECIALS.len()
        } else {
            SOURCE_SPECIALS.len()
        }
    }

    /// True for PAD, and for START and END in a target-side vocabulary.
    pub fn is_silent(&self, id: usize) -> bool {
        id == PAD_ID || (self.markers && (id == START_ID || id == END_ID))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str, TextError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TextError::IdOutOfRange { id, size: self.tokens.len() })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn ranked_words<S: AsRef<str>>(corpus: &[S], slots: usize) -> Result<Vec<&str>, TextError> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for line in corpus {
        for tok in line.as_ref().split_whitespace() {
            if SPECIALS.contains(&tok) {
                continue;
            }
            let next = counts.len();
            counts.entry(tok).or_insert((0, next)).0 += 1;
        }
    }
    if counts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(slots);
    Ok(ranked.into_iter().map(|(t, _, _)| t).collect())
}

/// Target-side vocabulary of the `max_size - 4` most frequent whitespace
/// tokens, ties in first-occurrence order.
pub fn build_word_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary, TextError> {
    let minimum = SPECIALS.len() + 1;
    if max_size < minimum {
        return Err(TextError::VocabTooSmall { requested: max_size, minimum });
    }
    Ok(Vocabulary::with_words(ranked_words(corpus, max_size - SPECIALS.len())?))
}

/// Source-side counterpart of [`build_word_vocab`] with only PAD and UNK reserved.
pub fn build_source_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary, TextError> {
    let minimum = SOURCE_SPECIALS.len() + 1;
    if max_size < minimum {
        return Err(TextError::VocabTooSmall { requested: max_size, minimum });
    }
    Ok(Vocabulary::source_with_words(ranked_words(corpus, max_size - SOURCE_SPECIALS.len())?))
}

/// Token ids padded or truncated to exactly `max_len`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = text.split_whitespace().take(max_len).map(|t| vocab.id_or_unk(t)).collect();
    ids.resize(max_len, PAD_ID);
    ids
}

/// Like [`encode`] but wraps the tokens in START and END first. Needs a
/// target-side vocabulary.
pub fn encode_wrapped(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>, TextError> {
    if !vocab.has_markers() {
        return Err(TextError::MissingMarkers);
    }
    let mut ids = vec![START_ID];
    ids.extend(text.split_whitespace().map(|t| vocab.id_or_unk(t)));
    ids.push(END_ID);
    ids.truncate(max_len);
    ids.resize(max_len, PAD_ID);
    Ok(ids)
}

/// Joins the tokens for `ids`, dropping PAD, START and END.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Result<String, TextError> {
    let mut out: Vec<&str> = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id)?;
        if !vocab.is_silent(id) {
            out.push(tok);
        }
    }
    Ok(out.join(" "))
}
