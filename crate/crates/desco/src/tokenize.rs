//! Tokenization with char-offset tracking, and expansion of span-level
//! alignments into the box-by-token alignment matrix.
//!
//! Two tokenizers are provided: a whitespace/punctuation word tokenizer
//! (the default) and a greedy longest-match subword tokenizer loaded from a
//! newline-delimited piece file using the `##` continuation convention.
//! Token offsets are non-overlapping, monotonically increasing char spans
//! covering all non-whitespace text, so span-level labels can be expanded
//! under either tokenizer.

use std::collections::HashSet;
use std::path::Path;

use crate::model::{AlignmentMatrix, CharSpan, ComposedQuery, ModelError};

/// A token with its half-open char span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: CharSpan,
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    Word { lowercase: bool },
    Subword(SubwordVocab),
}

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pieces: HashSet<String>,
    continuation_prefix: String,
    unknown_piece: String,
}

impl Tokenizer {
    /// Whitespace + punctuation splitting, original case.
    pub fn word() -> Self {
        Tokenizer::Word { lowercase: false }
    }

    /// Whitespace + punctuation splitting with lowercased token text.
    pub fn word_lowercase() -> Self {
        Tokenizer::Word { lowercase: true }
    }

    pub fn subword_from_pieces<I, S>(pieces: I, unknown_piece: &str) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Tokenizer::Subword(SubwordVocab {
            pieces: pieces.into_iter().map(Into::into).collect(),
            continuation_prefix: "##".to_string(),
            unknown_piece: unknown_piece.to_string(),
        })
    }

    /// Load a newline-delimited piece file ("##" marks continuation pieces).
    pub fn subword_from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let pieces = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string);
        Ok(Self::subword_from_pieces(pieces, "[UNK]"))
    }

    /// Parse a CLI tokenizer spec: `default`, `default-lower`, or
    /// `wordpiece:<vocab file>`.
    pub fn from_spec(spec: &str) -> Result<Self, ModelError> {
        if spec == "default" {
            Ok(Self::word())
        } else if spec == "default-lower" {
            Ok(Self::word_lowercase())
        } else if let Some(path) = spec.strip_prefix("wordpiece:") {
            Self::subword_from_file(path)
        } else {
            Err(ModelError::validation(
                "tokenizer",
                format!("unknown tokenizer spec {spec:?}"),
            ))
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        match self {
            Tokenizer::Word { lowercase } => word_tokenize(text, *lowercase),
            Tokenizer::Subword(vocab) => subword_tokenize(text, vocab),
        }
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }

    /// Truncate `text` to at most `max_tokens` tokens, cutting at the end of
    /// the last kept token. Returns the text unchanged when within budget.
    pub fn truncate_to_tokens(&self, text: &str, max_tokens: usize) -> String {
        let tokens = self.tokenize(text);
        if tokens.len() <= max_tokens {
            return text.to_string();
        }
        if max_tokens == 0 {
            return String::new();
        }
        let cut = tokens[max_tokens - 1].span.end;
        CharSpan::new(0, cut).slice(text).to_string()
    }
}

/// Maximal alphanumeric runs become one token each; every other
/// non-whitespace char is a single token.
fn word_tokenize(text: &str, lowercase: bool) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut run_text = String::new();

    let flush = |tokens: &mut Vec<Token>, start: &mut Option<usize>, buf: &mut String, end: usize| {
        if let Some(s) = start.take() {
            let text = if lowercase {
                buf.to_lowercase()
            } else {
                buf.clone()
            };
            tokens.push(Token {
                text,
                span: CharSpan::new(s, end),
            });
            buf.clear();
        }
    };

    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            flush(&mut tokens, &mut run_start, &mut run_text, i);
        } else if ch.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(i);
            }
            run_text.push(ch);
        } else {
            flush(&mut tokens, &mut run_start, &mut run_text, i);
            let text = if lowercase {
                ch.to_lowercase().to_string()
            } else {
                ch.to_string()
            };
            tokens.push(Token {
                text,
                span: CharSpan::new(i, i + 1),
            });
        }
    }
    let n = text.chars().count();
    flush(&mut tokens, &mut run_start, &mut run_text, n);
    tokens
}

/// Word-split first, then greedy longest-match pieces within each word.
/// A word with no matching prefix at some position becomes a single unknown
/// token covering the rest of the word.
fn subword_tokenize(text: &str, vocab: &SubwordVocab) -> Vec<Token> {
    let words = word_tokenize(text, false);
    let mut tokens = Vec::new();
    for word in words {
        let chars: Vec<char> = word.text.chars().collect();
        let mut pos = 0;
        let mut first = true;
        while pos < chars.len() {
            let mut len = chars.len() - pos;
            let mut matched = None;
            while len > 0 {
                let candidate: String = chars[pos..pos + len].iter().collect();
                let lookup = if first {
                    candidate
                } else {
                    format!("{}{}", vocab.continuation_prefix, candidate)
                };
                if vocab.pieces.contains(&lookup) {
                    matched = Some((lookup, len));
                    break;
                }
                len -= 1;
            }
            match matched {
                Some((piece, len)) => {
                    tokens.push(Token {
                        text: piece,
                        span: CharSpan::new(word.span.start + pos, word.span.start + pos + len),
                    });
                    pos += len;
                    first = false;
                }
                None => {
                    tokens.push(Token {
                        text: vocab.unknown_piece.clone(),
                        span: CharSpan::new(word.span.start + pos, word.span.end),
                    });
                    break;
                }
            }
        }
    }
    tokens
}

/// Expand a composed query's span-level alignments into the binary
/// box-by-token matrix: bit `(b, t)` is set iff token `t`'s span overlaps a
/// char alignment span of retained box `b`.
///
/// `budget` is the query token limit when the caller wants it enforced;
/// queries from the generators already satisfy it.
pub fn build_alignment_matrix(
    query: &ComposedQuery,
    tokenizer: &Tokenizer,
    budget: Option<usize>,
) -> Result<AlignmentMatrix, ModelError> {
    let tokens = tokenizer.tokenize(&query.text);
    if let Some(max) = budget {
        if tokens.len() > max {
            return Err(ModelError::BudgetExceeded {
                tokens: tokens.len(),
                budget: max,
            });
        }
    }
    let mut matrix = AlignmentMatrix::zeros(query.retained_boxes.len(), tokens.len());
    for align in &query.char_alignments {
        for (t, token) in tokens.iter().enumerate() {
            if token.span.overlaps(&align.span) {
                matrix.set(align.box_index, t, true);
            }
        }
    }
    for b in 0..matrix.n_boxes() {
        if matrix.row_sum(b) == 0 {
            return Err(ModelError::validation(
                "retained_boxes",
                format!("box {b} aligned to no token"),
            ));
        }
    }
    Ok(matrix)
}
