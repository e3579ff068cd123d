//! Arabic text preprocessing and tokenisation.

mod normalize;
mod vocab;
mod wordpiece;

use thiserror::Error;

pub use normalize::{
    collapse_repeats, drop_non_arabic_tokens, is_arabic_letter, is_diacritic, normalize_letters, preprocess,
    strip_diacritics_and_punct, strip_marks, NormalizationConfig,
};
pub use vocab::{
    build_source_vocab, build_word_vocab, decode, encode, encode_wrapped, Vocabulary, END, END_ID, PAD, PAD_ID,
    SOURCE_SPECIALS, SPECIALS, START, START_ID, UNK, UNK_ID,
};
pub use wordpiece::{train_wordpiece, wordpiece_tokenize, WordPieceModel, DEFAULT_CONTINUATION_PREFIX};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is below the minimum of {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("character {0:?} is outside the model alphabet")]
    UnknownCharacter(char),
    #[error("word of {len} characters exceeds the limit of {max}")]
    WordTooLong { len: usize, max: usize },
    #[error("vocabulary has no START/END markers")]
    MissingMarkers,
    #[error("empty word")]
    EmptyWord,
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whitespace tokens of already-normalised text.
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}
