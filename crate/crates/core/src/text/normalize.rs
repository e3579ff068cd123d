use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Which preprocessing stages run. Stages always apply in field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    pub normalize_letters: bool,
    pub strip_diacritics: bool,
    pub strip_punct_keep_q_excl: bool,
    pub collapse_repeats: bool,
    pub drop_non_arabic_tokens: bool,
    /// Keep runs of `*` intact (needed for masked targets).
    pub preserve_star_runs: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            normalize_letters: true,
            strip_diacritics: true,
            strip_punct_keep_q_excl: true,
            collapse_repeats: true,
            drop_non_arabic_tokens: true,
            preserve_star_runs: false,
        }
    }
}

impl NormalizationConfig {
    /// Full pipeline with star runs preserved, for parallel corpora.
    pub fn masking() -> Self {
        Self { preserve_star_runs: true, ..Self::default() }
    }
}

const RETAINED: [char; 3] = ['?', '\u{061F}', '!'];

fn is_retained(c: char) -> bool {
    RETAINED.contains(&c)
}

/// Tashkeel, Quranic annotation marks and tatweel.
pub fn is_diacritic(c: char) -> bool {
    matches!(c,
        '\u{0610}'..='\u{061A}'
        | '\u{064B}'..='\u{065F}'
        | '\u{0670}'
        | '\u{06D6}'..='\u{06DC}'
        | '\u{06DF}'..='\u{06E8}'
        | '\u{06EA}'..='\u{06ED}'
        | '\u{0640}')
}

pub fn is_arabic_letter(c: char) -> bool {
    matches!(c,
        '\u{0620}'..='\u{063F}'
        | '\u{0641}'..='\u{064A}'
        | '\u{066E}'..='\u{066F}'
        | '\u{0671}'..='\u{06D3}'
        | '\u{06D5}'
        | '\u{06EE}'..='\u{06EF}'
        | '\u{06FA}'..='\u{06FC}'
        | '\u{06FF}')
}

fn is_punct_or_symbol(c: char) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    let re = RE.get_or_init(|| Regex::new(r"^[\p{P}\p{S}]$").unwrap());
    let mut buf = [0u8; 4];
    re.is_match(c.encode_utf8(&mut buf))
}

fn squash_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps alef variants to bare alef, ta marbuta to ha and alef maqsura to ya.
pub fn normalize_letters(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{0623}' | '\u{0625}' | '\u{0622}' => '\u{0627}',
            '\u{0629}' => '\u{0647}',
            '\u{0649}' => '\u{064A}',
            other => other,
        })
        .collect()
}

/// Removes diacritics and punctuation, keeping `?`, `؟` and `!` as
/// standalone tokens.
pub fn strip_diacritics_and_punct(text: &str) -> String {
    strip_marks(text, true, true, false)
}

/// Configurable form of [`strip_diacritics_and_punct`]. Retained marks are
/// separated by spaces from any neighbour that is not the same mark, so a
/// run like `!!!!` stays contiguous for [`collapse_repeats`].
pub fn strip_marks(text: &str, diacritics: bool, punct: bool, keep_stars: bool) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last: Option<char> = None;
    for c in text.chars() {
        if diacritics && is_diacritic(c) {
            continue;
        }
        if punct && !is_retained(c) && !(keep_stars && c == '*') && is_punct_or_symbol(c) {
            continue;
        }
        if punct && !c.is_whitespace() {
            if let Some(prev) = last {
                let boundary = prev != c && !prev.is_whitespace() && (is_retained(prev) || is_retained(c));
                if boundary {
                    out.push(' ');
                }
            }
        }
        out.push(c);
        last = Some(c);
    }
    squash_whitespace(&out)
}

/// Collapses every run of three or more identical characters to one.
/// Runs of `*` are left alone when `preserve_star_runs` is set.
pub fn collapse_repeats(text: &str, preserve_star_runs: bool) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let mut j = i;
        while j < chars.len() && chars[j] == c {
            j += 1;
        }
        let run = j - i;
        if run >= 3 && !(preserve_star_runs && c == '*') {
            out.push(c);
        } else {
            out.extend(&chars[i..j]);
        }
        i = j;
    }
    out
}

/// Drops whitespace tokens holding anything other than Arabic letters,
/// Arabic marks or the retained `?`/`؟`/`!`.
pub fn drop_non_arabic_tokens(text: &str, preserve_star_runs: bool) -> String {
    text.split_whitespace()
        .filter(|tok| {
            let stars = preserve_star_runs && tok.chars().all(|c| c == '*');
            stars || tok.chars().all(|c| is_arabic_letter(c) || is_diacritic(c) || is_retained(c))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Full preprocessing pipeline followed by whitespace normalisation.
pub fn preprocess(text: &str, cfg: &NormalizationConfig) -> String {
    let mut s = if cfg.normalize_letters { normalize_letters(text) } else { text.to_string() };
    if cfg.strip_diacritics || cfg.strip_punct_keep_q_excl {
        s = strip_marks(&s, cfg.strip_diacritics, cfg.strip_punct_keep_q_excl, cfg.preserve_star_runs);
    }
    if cfg.collapse_repeats {
        s = collapse_repeats(&s, cfg.preserve_star_runs);
    }
    if cfg.drop_non_arabic_tokens {
        s = drop_non_arabic_tokens(&s, cfg.preserve_star_runs);
    }
    squash_whitespace(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn letters() {
        assert_eq!(normalize_letters(""), "");
        assert_eq!(normalize_letters("أكلة"), "اكله");
        assert_eq!(normalize_letters("على"), "علي");
        assert_eq!(normalize_letters("إآ abc"), "اا abc");
    }

    #[test]
    fn marks() {
        assert_eq!(strip_diacritics_and_punct("كيف؟!"), "كيف ؟ !");
        assert_eq!(strip_diacritics_and_punct("a,b"), "ab");
        assert_eq!(strip_diacritics_and_punct(""), "");
        assert_eq!(strip_diacritics_and_punct("مَرْحَبـــا"), "مرحبا");
        assert_eq!(strip_diacritics_and_punct("نعم، «لا»"), "نعم لا");
        assert_eq!(strip_marks("*** كلام!", true, true, true), "*** كلام !");
    }

    #[test]
    fn repeats() {
        assert_eq!(collapse_repeats("ههههه", false), "ه");
        assert_eq!(collapse_repeats("مرر", false), "مرر");
        assert_eq!(collapse_repeats("****", true), "****");
        assert_eq!(collapse_repeats("****", false), "*");
    }

    #[test]
    fn non_arabic() {
        assert_eq!(drop_non_arabic_tokens("انا love يوم", false), "انا يوم");
        assert_eq!(drop_non_arabic_tokens("*** كلام", true), "*** كلام");
        assert_eq!(drop_non_arabic_tokens("*** كلام", false), "كلام");
        assert_eq!(drop_non_arabic_tokens("", false), "");
        assert_eq!(drop_non_arabic_tokens("ok ؟ 2020 !", false), "؟ !");
    }

    #[test]
    fn pipeline() {
        let cfg = NormalizationConfig::default();
        assert_eq!(preprocess("أناااا هنا!!!!", &cfg), "انا هنا !");
        assert_eq!(preprocess("ة", &cfg), "ه");
        assert_eq!(preprocess("  ", &cfg), "");
    }

    #[test]
    fn normalized_output_has_no_variant_letters() {
        let out = normalize_letters("أإآةى ابc");
        assert!(!out.chars().any(|c| "أإآةى".contains(c)));
    }

    fn arabicish() -> impl Strategy<Value = String> {
        let pool: Vec<char> = "اأإآةىهيكلبمنت ؟?!!*,.ـَُِ ًّabc123😂\t\u{200c}«»".chars().collect();
        proptest::collection::vec(proptest::sample::select(pool), 0..40).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn idempotent_on_arabic_mixtures(s in arabicish()) {
            for cfg in [NormalizationConfig::default(), NormalizationConfig::masking()] {
                let once = preprocess(&s, &cfg);
                prop_assert_eq!(preprocess(&once, &cfg), once.clone());
            }
        }

        #[test]
        fn idempotent_on_any_string(s in any::<String>()) {
            let cfg = NormalizationConfig::default();
            let once = preprocess(&s, &cfg);
            prop_assert_eq!(preprocess(&once, &cfg), once);
        }
    }
}
