//! Text normalization, segmentation and stop-word filtering.
//!
//! Two segmenters are provided: a whitespace splitter for space-delimited
//! scripts and a forward-maximum-matching (FMM) segmenter driven by a word
//! list, for Chinese and other unsegmented scripts. Other engines can be
//! plugged in through the [`Segmenter`] trait.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("forward-maximum-matching segmentation requires a dictionary")]
    MissingDictionary,
    #[error("segmenter dictionary is empty")]
    EmptyDictionary,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// NFC, lower-case, collapse whitespace runs to a single space and trim.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let lowered = nfc.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Reads a one-entry-per-line UTF-8 list. Blank lines and `#` comments are skipped.
pub fn read_word_list(path: impl AsRef<Path>) -> Result<Vec<String>, TextError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_word_list(&raw))
}

pub fn parse_word_list(raw: &str) -> Vec<String> {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Whitespace,
    ForwardMaxMatch,
}

/// Ordered tokens of one post. Never contains empty strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tokens: tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Drops repeated tokens, keeping the first occurrence.
    pub fn deduplicated(&self) -> Self {
        let mut seen = HashSet::new();
        Self {
            tokens: self
                .tokens
                .iter()
                .filter(|t| seen.insert(t.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn into_inner(self) -> Vec<String> {
        self.tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopwordSet {
    words: HashSet<String>,
}

impl StopwordSet {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words
                .into_iter()
                .map(|w| normalize(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Ok(Self::new(read_word_list(path)?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&normalize(token))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegmenterDictionary {
    entries: HashSet<String>,
    max_entry_length: usize,
}

impl SegmenterDictionary {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entries: HashSet<String> = entries
            .into_iter()
            .map(|e| normalize(e.as_ref()))
            .filter(|e| !e.is_empty())
            .collect();
        let max_entry_length = entries.iter().map(|e| e.chars().count()).max().unwrap_or(0);
        Self {
            entries,
            max_entry_length,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Ok(Self::new(read_word_list(path)?))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(word)
    }

    pub fn max_entry_length(&self) -> usize {
        self.max_entry_length
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Splits raw text into pieces. Implementations must be deterministic.
pub trait Segmenter: Send + Sync {
    fn segment(&self, text: &str) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceSegmenter;

impl Segmenter for WhitespaceSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| w.trim_matches(is_punctuation))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Forward maximum matching. Concatenating the output reproduces the input.
#[derive(Debug, Clone)]
pub struct FmmSegmenter {
    dict: SegmenterDictionary,
}

impl FmmSegmenter {
    pub fn new(dict: SegmenterDictionary) -> Result<Self, TextError> {
        if dict.is_empty() {
            return Err(TextError::EmptyDictionary);
        }
        Ok(Self { dict })
    }

    pub fn dictionary(&self) -> &SegmenterDictionary {
        &self.dict
    }
}

impl Segmenter for FmmSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        fmm_segment(text, &self.dict)
    }
}

pub fn fmm_segment(text: &str, dict: &SegmenterDictionary) -> Vec<String> {
    // byte offsets of every char boundary, including the end
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < n_chars {
        let longest = dict.max_entry_length.min(n_chars - pos);
        let mut step = 1;
        for len in (2..=longest).rev() {
            if dict.contains(&text[bounds[pos]..bounds[pos + len]]) {
                step = len;
                break;
            }
        }
        out.push(text[bounds[pos]..bounds[pos + step]].to_string());
        pos += step;
    }
    out
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '，' | '。' | '！' | '？' | '、' | '；' | '：' | '“' | '”' | '‘' | '’' | '（' | '）'
                | '《' | '》' | '【' | '】' | '…' | '—' | '·' | '～'
        )
}

fn is_noise_token(token: &str) -> bool {
    token.chars().all(|c| c.is_whitespace() || is_punctuation(c))
}

/// Tokenizes normalized `text`. FMM output drops whitespace and punctuation pieces.
pub fn tokenize(
    text: &str,
    mode: TokenizerMode,
    dict: Option<&SegmenterDictionary>,
) -> Result<TokenSequence, TextError> {
    let normalized = normalize(text);
    match mode {
        TokenizerMode::Whitespace => Ok(TokenSequence::new(WhitespaceSegmenter.segment(&normalized))),
        TokenizerMode::ForwardMaxMatch => {
            let dict = dict.ok_or(TextError::MissingDictionary)?;
            if dict.is_empty() {
                return Err(TextError::EmptyDictionary);
            }
            Ok(TokenSequence::new(
                fmm_segment(&normalized, dict)
                    .into_iter()
                    .filter(|t| !is_noise_token(t)),
            ))
        }
    }
}

/// Tokens left after stop-word removal. `empty` marks a post with nothing left to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredTokens {
    pub tokens: TokenSequence,
    pub empty: bool,
}

pub fn filter_stopwords(tokens: &TokenSequence, stopwords: &StopwordSet) -> FilteredTokens {
    let kept = TokenSequence::new(tokens.iter().filter(|t| !stopwords.contains(t)));
    let empty = kept.is_empty();
    FilteredTokens {
        tokens: kept,
        empty,
    }
}

/// Tokenize, filter stop words and optionally deduplicate, with one configuration.
pub struct TextPipeline {
    mode: TokenizerMode,
    dictionary: Option<SegmenterDictionary>,
    stopwords: StopwordSet,
    dedup_tokens: bool,
}

impl TextPipeline {
    pub fn new(
        mode: TokenizerMode,
        dictionary: Option<SegmenterDictionary>,
        stopwords: StopwordSet,
        dedup_tokens: bool,
    ) -> Result<Self, TextError> {
        if mode == TokenizerMode::ForwardMaxMatch {
            match &dictionary {
                None => return Err(TextError::MissingDictionary),
                Some(d) if d.is_empty() => return Err(TextError::EmptyDictionary),
                _ => {}
            }
        }
        Ok(Self {
            mode,
            dictionary,
            stopwords,
            dedup_tokens,
        })
    }

    pub fn whitespace(stopwords: StopwordSet) -> Self {
        Self {
            mode: TokenizerMode::Whitespace,
            dictionary: None,
            stopwords,
            dedup_tokens: false,
        }
    }

    pub fn process(&self, text: &str) -> FilteredTokens {
        let tokens = tokenize(text, self.mode, self.dictionary.as_ref())
            .expect("dictionary presence checked at construction");
        let mut filtered = filter_stopwords(&tokens, &self.stopwords);
        if self.dedup_tokens {
            filtered.tokens = filtered.tokens.deduplicated();
        }
        filtered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(words: &[&str]) -> SegmenterDictionary {
        SegmenterDictionary::new(words.iter().copied())
    }

    #[test]
    fn whitespace_splits_words() {
        let t = tokenize("hello world", TokenizerMode::Whitespace, None).unwrap();
        assert_eq!(t.tokens(), ["hello", "world"]);
    }

    #[test]
    fn whitespace_strips_edge_punctuation_and_folds_case() {
        let t = tokenize("  Dimmable, LAMP!  eye-caring ", TokenizerMode::Whitespace, None).unwrap();
        assert_eq!(t.tokens(), ["dimmable", "lamp", "eye-caring"]);
    }

    #[test]
    fn empty_text_gives_no_tokens() {
        assert!(tokenize("", TokenizerMode::Whitespace, None).unwrap().is_empty());
        let d = dict(&["ab"]);
        assert!(tokenize("", TokenizerMode::ForwardMaxMatch, Some(&d))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn fmm_prefers_longest_entry() {
        let d = dict(&["ab", "abc", "c"]);
        let t = tokenize("abcc", TokenizerMode::ForwardMaxMatch, Some(&d)).unwrap();
        assert_eq!(t.tokens(), ["abc", "c"]);
    }

    #[test]
    fn fmm_chinese_example() {
        let d = dict(&["床头灯", "床头", "睡前", "冥想", "阅读"]);
        let t = tokenize("睡前冥想，床头灯阅读", TokenizerMode::ForwardMaxMatch, Some(&d)).unwrap();
        assert_eq!(t.tokens(), ["睡前", "冥想", "床头灯", "阅读"]);
    }

    #[test]
    fn fmm_falls_back_to_single_chars() {
        let d = dict(&["xyz"]);
        assert_eq!(fmm_segment("abx", &d), ["a", "b", "x"]);
    }

    #[test]
    fn fmm_without_dictionary_is_a_config_error() {
        assert!(matches!(
            tokenize("abc", TokenizerMode::ForwardMaxMatch, None),
            Err(TextError::MissingDictionary)
        ));
        assert!(TextPipeline::new(
            TokenizerMode::ForwardMaxMatch,
            None,
            StopwordSet::default(),
            false
        )
        .is_err());
    }

    #[test]
    fn dictionary_tracks_longest_entry_in_chars() {
        let d = dict(&["床头灯", "ab"]);
        assert_eq!(d.max_entry_length(), 3);
    }

    #[test]
    fn word_list_skips_comments_and_blanks() {
        let words = parse_word_list("# header\nthe\n\n  a \n#x\n");
        assert_eq!(words, ["the", "a"]);
    }

    #[test]
    fn stopword_removal_is_set_difference() {
        let w = TokenSequence::new(["a", "b", "c"]);
        let out = filter_stopwords(&w, &StopwordSet::new(["b"]));
        assert_eq!(out.tokens.tokens(), ["a", "c"]);
        assert!(!out.empty);
    }

    #[test]
    fn empty_stopword_set_is_identity() {
        let w = TokenSequence::new(["a", "b", "a"]);
        assert_eq!(filter_stopwords(&w, &StopwordSet::default()).tokens, w);
    }

    #[test]
    fn all_stopwords_sets_empty_flag() {
        let w = TokenSequence::new(["the", "the"]);
        let out = filter_stopwords(&w, &StopwordSet::new(["the"]));
        assert!(out.tokens.is_empty());
        assert!(out.empty);

        let pipeline = TextPipeline::whitespace(StopwordSet::new(["the"]));
        assert!(pipeline.process("The the THE").empty);
    }

    #[test]
    fn pipeline_dedup_flag_keeps_first_occurrence() {
        let p = TextPipeline::new(TokenizerMode::Whitespace, None, StopwordSet::default(), true)
            .unwrap();
        assert_eq!(p.process("b a b c a").tokens.tokens(), ["b", "a", "c"]);
    }

    #[test]
    fn normalize_is_nfc_and_collapses_whitespace() {
        // "e" + combining acute composes to U+00E9
        assert_eq!(normalize("Cafe\u{301}\t\n  Lamp "), "caf\u{e9} lamp");
    }

    fn brute_force_longest(text: &[char], pos: usize, dict: &SegmenterDictionary) -> usize {
        let mut best = 1;
        for end in pos + 1..=text.len() {
            let s: String = text[pos..end].iter().collect();
            if dict.contains(&s) {
                best = best.max(end - pos);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn fmm_reconstructs_input(text in "[abc床头灯 ]{0,30}", words in prop::collection::vec("[abc床头灯]{1,4}", 1..8)) {
            let d = SegmenterDictionary::new(&words);
            let pieces = fmm_segment(&text, &d);
            prop_assert_eq!(pieces.concat(), text.clone());
            prop_assert_eq!(fmm_segment(&text, &d), pieces);
        }

        #[test]
        fn fmm_is_greedy(text in "[abcd]{0,30}", words in prop::collection::vec("[abcd]{1,5}", 1..10)) {
            let d = SegmenterDictionary::new(&words);
            let chars: Vec<char> = text.chars().collect();
            let mut pos = 0;
            for piece in fmm_segment(&text, &d) {
                let len = piece.chars().count();
                prop_assert_eq!(len, brute_force_longest(&chars, pos, &d));
                pos += len;
            }
        }

        #[test]
        fn stopword_filter_properties(
            tokens in prop::collection::vec("[a-e]{1,2}", 0..20),
            stops in prop::collection::vec("[a-e]{1,2}", 0..6),
        ) {
            let w = TokenSequence::new(tokens.clone());
            let s = StopwordSet::new(&stops);
            let once = filter_stopwords(&w, &s).tokens;
            let twice = filter_stopwords(&once, &s).tokens;
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.len() <= w.len());
            // subsequence check
            let mut it = w.iter();
            for t in once.iter() {
                prop_assert!(it.any(|x| x == t));
            }
        }
    }
}
