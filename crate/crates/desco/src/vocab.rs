//! Frequency-ranked entity vocabulary construction from a caption corpus.
//!
//! Noun phrase candidates come from a self-contained heuristic chunker:
//! captions are split into word tokens, stopwords and common verbs break the
//! text into contiguous content-word runs, and each run yields one
//! normalized candidate phrase. Counting is map-reduce friendly: per-shard
//! [`PhraseCounter`]s merge by addition and ranking is deterministic.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CharSpan, VocabEntry};

const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords.txt");
const DEFAULT_VERBS: &str = include_str!("../assets/verbs.txt");

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus produced no candidate phrases")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabBuildConfig {
    /// Keep the `top_k` most frequent phrases.
    pub top_k: usize,
    /// Minimum phrase length in words.
    pub min_len: usize,
    /// Maximum phrase length in words; longer runs keep their trailing
    /// `max_len` words (the head noun sits at the end in English).
    pub max_len: usize,
    #[serde(skip)]
    pub stopwords: HashSet<String>,
    #[serde(skip)]
    pub verbs: HashSet<String>,
}

impl Default for VocabBuildConfig {
    fn default() -> Self {
        VocabBuildConfig {
            top_k: 10_000,
            min_len: 1,
            max_len: 4,
            stopwords: load_lexicon_str(DEFAULT_STOPWORDS),
            verbs: load_lexicon_str(DEFAULT_VERBS),
        }
    }
}

impl VocabBuildConfig {
    pub fn validate(&self) -> Result<(), VocabError> {
        if self.top_k < 1 {
            return Err(VocabError::InvalidConfig("top_k must be >= 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(VocabError::InvalidConfig(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn with_stopword_file(mut self, path: impl AsRef<Path>) -> Result<Self, VocabError> {
        self.stopwords = load_lexicon_file(path)?;
        Ok(self)
    }

    pub fn with_verb_file(mut self, path: impl AsRef<Path>) -> Result<Self, VocabError> {
        self.verbs = load_lexicon_file(path)?;
        Ok(self)
    }
}

/// Newline-delimited word list; `#` lines are comments.
fn load_lexicon_str(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn load_lexicon_file(path: impl AsRef<Path>) -> Result<HashSet<String>, VocabError> {
    Ok(load_lexicon_str(&std::fs::read_to_string(path)?))
}

/// Lowercase, strip leading articles, collapse whitespace.
pub fn normalize_phrase(phrase: &str) -> String {
    let lower = phrase.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let mut start = 0;
    while start < words.len() && matches!(words[start], "a" | "an" | "the") {
        start += 1;
    }
    words[start..].join(" ")
}

struct RawWord {
    text: String,
    span: CharSpan,
    /// Trailing sentence punctuation ends the current run.
    ends_run: bool,
}

/// Split a caption into words, trimming surrounding punctuation but keeping
/// internal hyphens and apostrophes.
fn split_words(caption: &str) -> Vec<RawWord> {
    let mut words = Vec::new();
    let chars: Vec<char> = caption.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        // Trim leading/trailing non-alphanumeric chars off the chunk.
        let mut a = start;
        let mut b = i;
        while a < b && !chars[a].is_alphanumeric() {
            a += 1;
        }
        while b > a && !chars[b - 1].is_alphanumeric() {
            b -= 1;
        }
        if a < b {
            words.push(RawWord {
                text: chars[a..b].iter().collect(),
                span: CharSpan::new(a, b),
                ends_run: chars[b..i].iter().any(|c| ",.;:!?".contains(*c)),
            });
        }
    }
    words
}

fn is_content_word(word: &str, cfg: &VocabBuildConfig) -> bool {
    let lower = word.to_lowercase();
    if lower.chars().any(|c| c.is_ascii_digit()) {
        return false;
    }
    if !lower.chars().any(|c| c.is_alphabetic()) {
        return false;
    }
    !cfg.stopwords.contains(&lower) && !cfg.verbs.contains(&lower)
}

/// Extract candidate noun phrases with their source spans.
///
/// Deterministic for a fixed input: maximal contiguous content-word runs,
/// bounded to `min_len..=max_len` words, normalized via [`normalize_phrase`].
pub fn extract_noun_phrases(caption: &str, cfg: &VocabBuildConfig) -> Vec<(CharSpan, String)> {
    let words = split_words(caption);
    let mut phrases = Vec::new();
    let mut run: Vec<&RawWord> = Vec::new();

    let mut flush = |run: &mut Vec<&RawWord>| {
        if run.is_empty() {
            return;
        }
        let kept: &[&RawWord] = if run.len() > cfg.max_len {
            &run[run.len() - cfg.max_len..]
        } else {
            &run[..]
        };
        if kept.len() >= cfg.min_len {
            let span = CharSpan::new(kept[0].span.start, kept[kept.len() - 1].span.end);
            let surface: Vec<&str> = kept.iter().map(|w| w.text.as_str()).collect();
            let normalized = normalize_phrase(&surface.join(" "));
            if !normalized.is_empty() {
                phrases.push((span, normalized));
            }
        }
        run.clear();
    };

    for word in &words {
        if is_content_word(&word.text, cfg) {
            run.push(word);
            if word.ends_run {
                flush(&mut run);
            }
        } else {
            flush(&mut run);
        }
    }
    flush(&mut run);
    phrases
}

/// Additively mergeable phrase counts for one corpus shard.
#[derive(Debug, Default, Clone)]
pub struct PhraseCounter {
    counts: HashMap<String, u64>,
    pub captions_seen: u64,
}

impl PhraseCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_caption(&mut self, caption: &str, cfg: &VocabBuildConfig) {
        self.captions_seen += 1;
        for (_, phrase) in extract_noun_phrases(caption, cfg) {
            *self.counts.entry(phrase).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: PhraseCounter) {
        self.captions_seen += other.captions_seen;
        for (phrase, n) in other.counts {
            *self.counts.entry(phrase).or_insert(0) += n;
        }
    }

    pub fn distinct_phrases(&self) -> usize {
        self.counts.len()
    }

    /// Rank by descending frequency, ties broken lexicographically, and keep
    /// the top `cfg.top_k` as rank-stubbed entries.
    pub fn into_vocabulary(self, cfg: &VocabBuildConfig) -> Result<Vec<VocabEntry>, VocabError> {
        cfg.validate()?;
        if self.counts.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = self.counts.into_iter().collect();
        ranked.sort_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then_with(|| pa.cmp(pb)));
        ranked.truncate(cfg.top_k);
        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(rank, (entity, _))| VocabEntry::stub(entity, rank as u32))
            .collect())
    }
}

/// Count and rank in one pass over an in-memory caption stream.
pub fn build_vocabulary<I, S>(corpus: I, cfg: &VocabBuildConfig) -> Result<Vec<VocabEntry>, VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counter = PhraseCounter::new();
    for caption in corpus {
        counter.add_caption(caption.as_ref(), cfg);
    }
    counter.into_vocabulary(cfg)
}
