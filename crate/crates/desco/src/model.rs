//! Domain types shared by the whole pipeline, plus JSONL (de)serialization.
//!
//! All records are immutable after construction and safe to share across
//! parallel workers. Character spans are half-open `[start, end)` ranges of
//! Unicode scalar values (not bytes), so they are unambiguous regardless of
//! how the surrounding text is encoded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced while parsing or validating records.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed JSON{}: {source}", line_context(.line))]
    Parse {
        line: Option<usize>,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid {field}{}: {message}", line_context(.line))]
    Validation {
        field: &'static str,
        message: String,
        line: Option<usize>,
    },
    #[error("unsupported schema version {found} (expected 1)")]
    UnsupportedVersion { found: u64 },
    #[error("token count {tokens} exceeds budget {budget}")]
    BudgetExceeded { tokens: usize, budget: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn line_context(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

impl ModelError {
    /// Attach a 1-based line number to parse/validation errors.
    pub fn at_line(self, n: usize) -> Self {
        match self {
            ModelError::Parse { source, .. } => ModelError::Parse {
                line: Some(n),
                source,
            },
            ModelError::Validation { field, message, .. } => ModelError::Validation {
                field,
                message,
                line: Some(n),
            },
            other => other,
        }
    }

    pub(crate) fn validation(field: &'static str, message: impl Into<String>) -> Self {
        ModelError::Validation {
            field,
            message: message.into(),
            line: None,
        }
    }
}

/// Half-open span `[start, end)` in Unicode scalar (char) indices.
///
/// Serialized as a two-element array `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        CharSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// True when the two half-open ranges intersect.
    pub fn overlaps(&self, other: &CharSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Shift both endpoints right by `offset` chars.
    pub fn shifted(&self, offset: usize) -> CharSpan {
        CharSpan::new(self.start + offset, self.end + offset)
    }

    /// Slice `text` by char indices. Panics if the span is out of bounds,
    /// so callers must validate first.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let byte_start = text
            .char_indices()
            .nth(self.start)
            .map(|(b, _)| b)
            .unwrap_or(text.len());
        let byte_end = if self.end > self.start {
            text.char_indices()
                .nth(self.end - 1)
                .map(|(b, c)| b + c.len_utf8())
                .unwrap_or(text.len())
        } else {
            byte_start
        };
        &text[byte_start..byte_end]
    }
}

impl TryFrom<[usize; 2]> for CharSpan {
    type Error = String;

    fn try_from(v: [usize; 2]) -> Result<Self, Self::Error> {
        if v[1] < v[0] {
            return Err(format!("span end {} precedes start {}", v[1], v[0]));
        }
        Ok(CharSpan::new(v[0], v[1]))
    }
}

impl From<CharSpan> for [usize; 2] {
    fn from(s: CharSpan) -> Self {
        [s.start, s.end]
    }
}

/// Axis-aligned box in corner format, pixel coordinates.
///
/// Serialized as a four-element array `[x1, y1, x2, y2]`. Construction
/// rejects inverted or zero-area boxes and negative coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ModelError> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.check().map_err(|m| ModelError::validation("box", m))?;
        Ok(b)
    }

    fn check(&self) -> Result<(), String> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(format!("non-finite coordinate in {coords:?}"));
        }
        if coords.iter().any(|&c| c < 0.0) {
            return Err(format!("negative coordinate in {coords:?}"));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(format!(
                "degenerate box [{}, {}, {}, {}] (requires x1 < x2 and y1 < y2)",
                self.x1, self.y1, self.x2, self.y2
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        let b = BoundingBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        };
        b.check()?;
        Ok(b)
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// An image's detection annotations: boxes labeled with entity names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(u32, u32)>,
    pub boxes: Vec<BoundingBox>,
    /// For each box, the index into `entities` it is labeled with.
    pub box_entity: Vec<usize>,
    /// Positive entity names present in the image.
    pub entities: Vec<String>,
}

impl DetectionSample {
    /// Indices of the boxes labeled with entity `entity_idx`.
    pub fn boxes_of_entity(&self, entity_idx: usize) -> Vec<usize> {
        self.box_entity
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == entity_idx)
            .map(|(b, _)| b)
            .collect()
    }
}

impl Validate for DetectionSample {
    fn validate(&self) -> Result<(), ModelError> {
        if self.box_entity.len() != self.boxes.len() {
            return Err(ModelError::validation(
                "box_entity",
                format!(
                    "length {} does not match {} boxes",
                    self.box_entity.len(),
                    self.boxes.len()
                ),
            ));
        }
        for &e in &self.box_entity {
            if e >= self.entities.len() {
                return Err(ModelError::validation(
                    "box_entity",
                    format!("index {e} out of range for {} entities", self.entities.len()),
                ));
            }
        }
        for (i, entity) in self.entities.iter().enumerate() {
            if entity.is_empty() {
                return Err(ModelError::validation("entities", "empty entity name"));
            }
            if !self.box_entity.contains(&i) {
                return Err(ModelError::validation(
                    "entities",
                    format!("entity {entity:?} has no box referencing it"),
                ));
            }
        }
        Ok(())
    }
}

/// A phrase in a caption aligned to zero or more boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub span: CharSpan,
    pub box_indices: Vec<usize>,
}

/// An image's grounding annotations: a caption with phrase-to-box alignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub image_id: String,
    pub caption: String,
    pub phrases: Vec<Phrase>,
    pub boxes: Vec<BoundingBox>,
}

impl Validate for GroundingSample {
    fn validate(&self) -> Result<(), ModelError> {
        let n_chars = self.caption.chars().count();
        let mut spans: Vec<CharSpan> = Vec::with_capacity(self.phrases.len());
        for phrase in &self.phrases {
            if phrase.span.is_empty() || phrase.span.end > n_chars {
                return Err(ModelError::validation(
                    "phrases",
                    format!(
                        "span [{}, {}) outside caption of {} chars",
                        phrase.span.start, phrase.span.end, n_chars
                    ),
                ));
            }
            for prev in &spans {
                if prev.overlaps(&phrase.span) {
                    return Err(ModelError::validation(
                        "phrases",
                        format!(
                            "span [{}, {}) overlaps [{}, {})",
                            phrase.span.start, phrase.span.end, prev.start, prev.end
                        ),
                    ));
                }
            }
            spans.push(phrase.span);
            for &b in &phrase.box_indices {
                if b >= self.boxes.len() {
                    return Err(ModelError::validation(
                        "phrases",
                        format!("box index {b} out of range for {} boxes", self.boxes.len()),
                    ));
                }
            }
        }
        for b in 0..self.boxes.len() {
            if !self.phrases.iter().any(|p| p.box_indices.contains(&b)) {
                return Err(ModelError::validation(
                    "boxes",
                    format!("box {b} is not referenced by any phrase"),
                ));
            }
        }
        Ok(())
    }
}

/// An entity's language-model-generated knowledge: type, description, and
/// confusable similar objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub entity: String,
    #[serde(default)]
    pub type_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub similar_objects: Vec<String>,
    #[serde(default)]
    pub frequency_rank: u32,
}

impl VocabEntry {
    /// A rank-only stub with no description, as produced by vocabulary
    /// building before descriptions are fetched.
    pub fn stub(entity: impl Into<String>, frequency_rank: u32) -> Self {
        VocabEntry {
            entity: entity.into(),
            type_name: String::new(),
            description: String::new(),
            similar_objects: Vec::new(),
            frequency_rank,
        }
    }
}

impl Validate for VocabEntry {
    fn validate(&self) -> Result<(), ModelError> {
        if self.entity.is_empty() {
            return Err(ModelError::validation("entity", "entity name is empty"));
        }
        let lower = self.entity.to_lowercase();
        if self
            .similar_objects
            .iter()
            .any(|s| s.to_lowercase() == lower)
        {
            return Err(ModelError::validation(
                "similar_objects",
                format!("contains the entity itself ({:?})", self.entity),
            ));
        }
        Ok(())
    }
}

/// What role a sub-query plays inside a composed query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubQueryKind {
    EntityDescription,
    ConfusableDescription,
    RandomNegative,
    PositiveCaption,
    NegativeCaption,
    PlainEntity,
}

impl SubQueryKind {
    /// Kinds that are negative by definition.
    pub fn forces_negative(&self) -> bool {
        matches!(
            self,
            SubQueryKind::ConfusableDescription
                | SubQueryKind::RandomNegative
                | SubQueryKind::NegativeCaption
        )
    }
}

/// A labeled span within a sub-query's own text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub span: CharSpan,
    pub box_indices: Vec<usize>,
}

/// One unit packed into a composed query: an entity name, a description,
/// or a caption, with its polarity and labeled spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuery {
    pub text: String,
    pub kind: SubQueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_entity: Option<String>,
    pub positive: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub span_labels: Vec<SpanLabel>,
}

impl Validate for SubQuery {
    fn validate(&self) -> Result<(), ModelError> {
        if self.kind.forces_negative() && self.positive {
            return Err(ModelError::validation(
                "positive",
                format!("{:?} sub-queries must be negative", self.kind),
            ));
        }
        if !self.positive && !self.span_labels.is_empty() {
            return Err(ModelError::validation(
                "span_labels",
                "negative sub-queries must not carry span labels",
            ));
        }
        let n_chars = self.text.chars().count();
        for label in &self.span_labels {
            if label.span.is_empty() || label.span.end > n_chars {
                return Err(ModelError::validation(
                    "span_labels",
                    format!(
                        "span [{}, {}) outside sub-query text of {} chars",
                        label.span.start, label.span.end, n_chars
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// A sub-query placed at a char offset within the composed query text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedSubQuery {
    pub offset: usize,
    #[serde(flatten)]
    pub sub: SubQuery,
}

/// A span in the composed query text aligned to a retained box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharAlignment {
    pub span: CharSpan,
    /// Index into `ComposedQuery::retained_boxes`.
    #[serde(rename = "box")]
    pub box_index: usize,
}

/// An ordered pack of sub-queries with the boxes that survived label
/// assignment and the span-to-box alignments that ground them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedQuery {
    pub image_id: String,
    pub text: String,
    pub sub_queries: Vec<PlacedSubQuery>,
    pub retained_boxes: Vec<BoundingBox>,
    pub char_alignments: Vec<CharAlignment>,
    /// The seed this query was generated from, for reproducibility.
    pub seed: u64,
}

impl ComposedQuery {
    /// True when no positive sub-query survived packing.
    pub fn is_full_negative(&self) -> bool {
        !self.sub_queries.iter().any(|p| p.sub.positive)
    }

    /// Char spans of positive sub-queries, in composed-text coordinates.
    pub fn positive_extents(&self) -> Vec<CharSpan> {
        self.sub_queries
            .iter()
            .filter(|p| p.sub.positive)
            .map(|p| CharSpan::new(p.offset, p.offset + p.sub.text.chars().count()))
            .collect()
    }
}

impl Validate for ComposedQuery {
    fn validate(&self) -> Result<(), ModelError> {
        let n_chars = self.text.chars().count();
        let mut cursor = 0usize;
        for placed in &self.sub_queries {
            placed.sub.validate()?;
            let len = placed.sub.text.chars().count();
            if placed.offset < cursor {
                return Err(ModelError::validation(
                    "sub_queries",
                    format!("offset {} overlaps previous sub-query", placed.offset),
                ));
            }
            if placed.offset + len > n_chars {
                return Err(ModelError::validation(
                    "sub_queries",
                    format!(
                        "sub-query at offset {} extends past text of {} chars",
                        placed.offset, n_chars
                    ),
                ));
            }
            let window = CharSpan::new(placed.offset, placed.offset + len);
            if window.slice(&self.text) != placed.sub.text {
                return Err(ModelError::validation(
                    "sub_queries",
                    format!(
                        "text at offset {} does not match sub-query text",
                        placed.offset
                    ),
                ));
            }
            for label in &placed.sub.span_labels {
                for &b in &label.box_indices {
                    if b >= self.retained_boxes.len() {
                        return Err(ModelError::validation(
                            "span_labels",
                            format!(
                                "box index {b} out of range for {} retained boxes",
                                self.retained_boxes.len()
                            ),
                        ));
                    }
                }
            }
            cursor = placed.offset + len;
        }
        for align in &self.char_alignments {
            if align.span.is_empty() || align.span.end > n_chars {
                return Err(ModelError::validation(
                    "char_alignments",
                    format!(
                        "span [{}, {}) outside query text of {} chars",
                        align.span.start, align.span.end, n_chars
                    ),
                ));
            }
            if align.box_index >= self.retained_boxes.len() {
                return Err(ModelError::validation(
                    "char_alignments",
                    format!(
                        "box index {} out of range for {} retained boxes",
                        align.box_index,
                        self.retained_boxes.len()
                    ),
                ));
            }
        }
        for b in 0..self.retained_boxes.len() {
            if !self.char_alignments.iter().any(|a| a.box_index == b) {
                return Err(ModelError::validation(
                    "retained_boxes",
                    format!("retained box {b} has no aligned char span"),
                ));
            }
        }
        Ok(())
    }
}

/// Binary box-by-token ground-truth alignment matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    n_boxes: usize,
    n_tokens: usize,
    bits: Vec<bool>,
}

impl AlignmentMatrix {
    pub fn zeros(n_boxes: usize, n_tokens: usize) -> Self {
        AlignmentMatrix {
            n_boxes,
            n_tokens,
            bits: vec![false; n_boxes * n_tokens],
        }
    }

    pub fn n_boxes(&self) -> usize {
        self.n_boxes
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn get(&self, box_idx: usize, token_idx: usize) -> bool {
        self.bits[box_idx * self.n_tokens + token_idx]
    }

    pub fn set(&mut self, box_idx: usize, token_idx: usize, value: bool) {
        self.bits[box_idx * self.n_tokens + token_idx] = value;
    }

    pub fn row_sum(&self, box_idx: usize) -> usize {
        (0..self.n_tokens).filter(|&t| self.get(box_idx, t)).count()
    }

    /// True when token `token_idx` is aligned to at least one box.
    pub fn token_is_positive(&self, token_idx: usize) -> bool {
        (0..self.n_boxes).any(|b| self.get(b, token_idx))
    }
}

/// One model prediction: a box with an alignment confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Validate for Prediction {
    fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.confidence) || !self.confidence.is_finite() {
            return Err(ModelError::validation(
                "confidence",
                format!("{} is outside [0, 1]", self.confidence),
            ));
        }
        Ok(())
    }
}

/// Prediction set for one (image, query) pair, as read from predictions JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    #[serde(default)]
    pub query_id: String,
    pub predictions: Vec<Prediction>,
}

impl Validate for PredictionRecord {
    fn validate(&self) -> Result<(), ModelError> {
        for p in &self.predictions {
            p.validate()?;
        }
        Ok(())
    }
}

/// Pre-generated hard negative captions for one positive caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeCaptionRecord {
    pub caption: String,
    pub negatives: Vec<String>,
}

impl Validate for NegativeCaptionRecord {
    fn validate(&self) -> Result<(), ModelError> {
        if self.caption.is_empty() {
            return Err(ModelError::validation("caption", "caption is empty"));
        }
        Ok(())
    }
}

/// A caption-bearing input line; grounding samples parse as this too since
/// they carry a `caption` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption: String,
}

impl Validate for CaptionRecord {
    fn validate(&self) -> Result<(), ModelError> {
        Ok(())
    }
}

/// Record types that can check their own invariants after parsing.
pub trait Validate {
    fn validate(&self) -> Result<(), ModelError>;
}
