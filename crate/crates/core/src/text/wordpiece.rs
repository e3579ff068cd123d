use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::vocab::Vocabulary;
use super::TextError;

pub const DEFAULT_CONTINUATION_PREFIX: &str = "##";
const DEFAULT_MAX_WORD_CHARS: usize = 100;
const HEADER_KEY: &str = "continuation_prefix=";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceModel {
    pub vocab: Vocabulary,
    pub continuation_prefix: String,
    pub max_word_chars: usize,
}

impl WordPieceModel {
    /// Number of learned pieces, excluding the special tokens.
    pub fn piece_count(&self) -> usize {
        self.vocab.len() - self.vocab.specials_len()
    }

    pub fn to_file_string(&self) -> String {
        format!("{HEADER_KEY}{}\n{}", self.continuation_prefix, self.vocab.to_file_string())
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let (header, rest) = text.split_once('\n').unwrap_or((text, ""));
        let prefix = header
            .strip_prefix(HEADER_KEY)
            .ok_or_else(|| TextError::BadVocabFile(format!("missing `{HEADER_KEY}` header")))?;
        if prefix.is_empty() {
            return Err(TextError::BadVocabFile("empty continuation prefix".into()));
        }
        Ok(Self {
            vocab: Vocabulary::parse(rest)?,
            continuation_prefix: prefix.to_string(),
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Tokenizes whitespace-separated text, mapping words that cannot be
    /// segmented to UNK.
    pub fn tokenize_text(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match wordpiece_tokenize(word, self) {
                Ok(pieces) => out.extend(pieces),
                Err(_) => out.push(super::UNK.to_string()),
            }
        }
        out
    }
}

/// Trains a piece inventory by repeatedly merging the most frequent adjacent
/// pair. `vocab_size` counts pieces only; the alphabet holds every observed
/// character in both initial and continuation form.
pub fn train_wordpiece<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<WordPieceModel, TextError> {
    let prefix = DEFAULT_CONTINUATION_PREFIX;
    let mut word_counts: HashMap<&str, usize> = HashMap::new();
    let mut words_in_order: Vec<&str> = Vec::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            let c = word_counts.entry(w).or_insert(0);
            if *c == 0 {
                words_in_order.push(w);
            }
            *c += 1;
        }
    }
    if words_in_order.is_empty() {
        return Err(TextError::EmptyCorpus);
    }

    let mut pieces: Vec<String> = Vec::new();
    let mut known: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut add = |p: String, pieces: &mut Vec<String>| {
        if known.insert(p.clone()) {
            pieces.push(p);
        }
    };
    let mut words: Vec<(Vec<String>, usize)> = Vec::with_capacity(words_in_order.len());
    for w in &words_in_order {
        let mut split = Vec::new();
        for (i, c) in w.chars().enumerate() {
            let initial = c.to_string();
            let cont = format!("{prefix}{c}");
            add(initial.clone(), &mut pieces);
            add(cont.clone(), &mut pieces);
            split.push(if i == 0 { initial } else { cont });
        }
        words.push((split, word_counts[w]));
    }
    if vocab_size < pieces.len() {
        return Err(TextError::VocabTooSmall { requested: vocab_size, minimum: pieces.len() });
    }

    while pieces.len() < vocab_size {
        let mut pair_counts: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
        for (split, count) in &words {
            for win in split.windows(2) {
                let next = pair_counts.len();
                pair_counts.entry((win[0].as_str(), win[1].as_str())).or_insert((0, next)).0 += count;
            }
        }
        let Some(((a, b), _)) = pair_counts
            .into_iter()
            .max_by(|x, y| x.1 .0.cmp(&y.1 .0).then(y.1 .1.cmp(&x.1 .1)))
        else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{}", b.strip_prefix(prefix).unwrap_or(&b));
        for (split, _) in &mut words {
            let mut i = 0;
            while i + 1 < split.len() {
                if split[i] == a && split[i + 1] == b {
                    split[i] = merged.clone();
                    split.remove(i + 1);
                }
                i += 1;
            }
        }
        add(merged, &mut pieces);
    }

    Ok(WordPieceModel {
        vocab: Vocabulary::with_words(pieces),
        continuation_prefix: prefix.to_string(),
        max_word_chars: DEFAULT_MAX_WORD_CHARS,
    })
}

/// Greedy longest-match-first segmentation.
pub fn wordpiece_tokenize(word: &str, model: &WordPieceModel) -> Result<Vec<String>, TextError> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Err(TextError::EmptyWord);
    }
    if chars.len() > model.max_word_chars {
        return Err(TextError::WordTooLong { len: chars.len(), max: model.max_word_chars });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let body: String = chars[start..end].iter().collect();
            let piece = if start > 0 { format!("{}{body}", model.continuation_prefix) } else { body };
            if model.vocab.contains(&piece) {
                found = Some((piece, end));
                break;
            }
        }
        let (piece, end) = found.ok_or(TextError::UnknownCharacter(chars[start]))?;
        out.push(piece);
        start = end;
    }
    Ok(out)
}
