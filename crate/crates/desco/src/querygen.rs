//! Composed-query generation.
//!
//! Two families of generators share the same packing and label-assignment
//! machinery:
//!
//! - the description-conditioned generators build context-sensitive queries:
//!   entity descriptions paired with confusable-object descriptions, entity
//!   names dropped with probability `p_drop`, hard negative captions mixed
//!   into grounding queries, and the positive caption itself droppable so
//!   full-negative queries occur;
//! - the baseline generators reproduce the plain name-list / caption-list
//!   recipe: positives are never dropped and all boxes are always retained.
//!
//! Sub-queries are rendered as `"{text}."` units joined by spaces, so the
//! composed text reads `"u1. u2. u3."`. A unit therefore costs its own token
//! count plus one. Every generator derives its RNG seed from
//! `(cfg.seed, image_id, purpose)`, which makes output byte-reproducible
//! for any worker count or execution order.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{
    BoundingBox, CharAlignment, CharSpan, ComposedQuery, DetectionSample, GroundingSample,
    ModelError, PlacedSubQuery, SpanLabel, SubQuery, SubQueryKind, VocabEntry,
};
use crate::tokenize::Tokenizer;
use crate::vocab::normalize_phrase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Desco,
    GlipBaseline,
}

/// Generation knobs. `p_drop` governs both entity-name dropping in the
/// detection path and positive-caption dropping in the grounding caption
/// path; `p_des` routes grounding samples to the detection path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub mode: GenMode,
    pub p_drop: f64,
    pub p_des: f64,
    pub max_query_tokens: usize,
    /// Random vocabulary negatives added per positive entity.
    pub n_random_negatives: usize,
    /// Confusable descriptions per positive entity; `None` keeps all
    /// similar objects.
    pub n_confusables: Option<usize>,
    pub seed: u64,
    /// Prepend "Detect: " to detection-style queries.
    pub detect_prefix: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mode: GenMode::Desco,
            p_drop: 0.5,
            p_des: 0.5,
            max_query_tokens: 256,
            n_random_negatives: 2,
            n_confusables: None,
            seed: 0,
            detect_prefix: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, p) in [("p_drop", self.p_drop), ("p_des", self.p_des)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ModelError::validation(
                    "config",
                    format!("{name} = {p} is outside [0, 1]"),
                ));
            }
        }
        if self.max_query_tokens < 16 {
            return Err(ModelError::validation(
                "config",
                format!("max_query_tokens = {} is below 16", self.max_query_tokens),
            ));
        }
        Ok(())
    }
}

/// Entity descriptions with deterministic iteration order and normalized
/// name lookup.
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from entries, first occurrence of a normalized name winning.
    pub fn new(entries: Vec<VocabEntry>) -> Self {
        let mut kept = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for entry in entries {
            let key = normalize_phrase(&entry.entity);
            if key.is_empty() || index.contains_key(&key) {
                continue;
            }
            index.insert(key, kept.len());
            kept.push(entry);
        }
        Vocabulary {
            entries: kept,
            index,
        }
    }

    pub fn lookup(&self, name: &str) -> Option<&VocabEntry> {
        self.index
            .get(&normalize_phrase(name))
            .map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Stable per-record seed: SHA-256 over (global seed, purpose, image id).
pub fn derive_seed(global_seed: u64, image_id: &str, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(image_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest >= 8 bytes"))
}

/// Render a positive description sub-query for an entry.
///
/// With `keep_name` the text is `"{entity}, a kind of {type}, {description}"`
/// and only the entity name span is labeled; without it the text is
/// `"a kind of {type}, {description}"` and the whole span is labeled.
/// Box indices are attached later by the generators.
pub fn render_description_subquery(entry: &VocabEntry, keep_name: bool) -> SubQuery {
    let body = if entry.type_name.is_empty() {
        entry.description.clone()
    } else {
        format!("a kind of {}, {}", entry.type_name, entry.description)
    };
    let (text, span) = if keep_name {
        let text = format!("{}, {}", entry.entity, body);
        (text, CharSpan::new(0, entry.entity.chars().count()))
    } else {
        let len = body.chars().count();
        (body, CharSpan::new(0, len))
    };
    SubQuery {
        text,
        kind: SubQueryKind::EntityDescription,
        source_entity: Some(entry.entity.clone()),
        positive: true,
        span_labels: vec![SpanLabel {
            span,
            box_indices: Vec::new(),
        }],
    }
}

fn render_confusable_subquery(entry: &VocabEntry, keep_name: bool) -> SubQuery {
    let mut sub = render_description_subquery(entry, keep_name);
    sub.kind = SubQueryKind::ConfusableDescription;
    sub.positive = false;
    sub.span_labels.clear();
    sub
}

fn render_random_negative(entry: &VocabEntry) -> SubQuery {
    let text = if entry.description.is_empty() {
        entry.entity.clone()
    } else {
        render_description_subquery(entry, true).text
    };
    SubQuery {
        text,
        kind: SubQueryKind::RandomNegative,
        source_entity: Some(entry.entity.clone()),
        positive: false,
        span_labels: Vec::new(),
    }
}

fn plain_entity_subquery(entity: &str, box_indices: Vec<usize>) -> SubQuery {
    let len = entity.chars().count();
    SubQuery {
        text: entity.to_string(),
        kind: SubQueryKind::PlainEntity,
        source_entity: Some(entity.to_string()),
        positive: true,
        span_labels: vec![SpanLabel {
            span: CharSpan::new(0, len),
            box_indices,
        }],
    }
}

fn attach_boxes(mut sub: SubQuery, box_indices: &[usize]) -> SubQuery {
    for label in &mut sub.span_labels {
        label.box_indices = box_indices.to_vec();
    }
    sub
}

/// Strip trailing periods/whitespace so the unit renderer can add its own
/// separator period; clips labeled spans that reached into the stripped tail.
fn strip_trailing_period(mut sub: SubQuery) -> SubQuery {
    let trimmed: String = sub
        .text
        .trim_end_matches(|c: char| c == '.' || c.is_whitespace())
        .to_string();
    if trimmed.len() != sub.text.len() {
        let new_len = trimmed.chars().count();
        sub.text = trimmed;
        sub.span_labels.retain_mut(|label| {
            label.span.end = label.span.end.min(new_len);
            !label.span.is_empty()
        });
    }
    sub
}

/// Truncate a sub-query to `max_tokens` total unit tokens (its own trailing
/// period included), clipping span labels to the new length.
fn truncate_subquery(mut sub: SubQuery, tokenizer: &Tokenizer, max_tokens: usize) -> SubQuery {
    let body_budget = max_tokens.saturating_sub(1).max(1);
    sub.text = tokenizer.truncate_to_tokens(&sub.text, body_budget);
    let new_len = sub.text.chars().count();
    sub.span_labels.retain_mut(|label| {
        label.span.start = label.span.start.min(new_len);
        label.span.end = label.span.end.min(new_len);
        !label.span.is_empty()
    });
    sub
}

/// Packing result: kept sub-queries with their offsets, and the joined text.
pub struct PackedQuery {
    pub placed: Vec<PlacedSubQuery>,
    pub text: String,
}

fn concat_units(kept: Vec<SubQuery>) -> PackedQuery {
    let mut text = String::new();
    let mut placed = Vec::with_capacity(kept.len());
    let mut offset = 0usize;
    for sub in kept {
        let len = sub.text.chars().count();
        if !text.is_empty() {
            text.push(' ');
            offset += 1;
        }
        text.push_str(&sub.text);
        text.push('.');
        placed.push(PlacedSubQuery { offset, sub });
        offset += len + 1;
    }
    PackedQuery { placed, text }
}

fn unit_cost(sub: &SubQuery, tokenizer: &Tokenizer) -> usize {
    tokenizer.count_tokens(&sub.text) + 1
}

/// Uniformly shuffle, then greedily keep sub-queries while the token budget
/// holds, skipping any that would overflow. At least one sub-query is always
/// retained: if nothing fits, the first shuffled one is truncated to the
/// budget.
pub fn subsample_concat(
    sub_queries: Vec<SubQuery>,
    cfg: &GenConfig,
    tokenizer: &Tokenizer,
    rng: &mut ChaCha8Rng,
) -> PackedQuery {
    assert!(
        !sub_queries.is_empty(),
        "subsample_concat needs >= 1 sub-query"
    );
    let mut shuffled = sub_queries;
    shuffled.shuffle(rng);

    let budget = cfg.max_query_tokens;
    let mut kept = Vec::new();
    let mut total = 0usize;
    let mut skipped_first: Option<SubQuery> = None;
    for sub in shuffled {
        let cost = unit_cost(&sub, tokenizer);
        if total + cost <= budget {
            total += cost;
            kept.push(sub);
        } else if skipped_first.is_none() {
            skipped_first = Some(sub);
        }
    }
    if kept.is_empty() {
        let sub = skipped_first.expect("non-empty input");
        kept.push(truncate_subquery(sub, tokenizer, budget));
    }
    concat_units(kept)
}

/// Drop boxes whose positive sub-queries were all dropped, re-index the
/// survivors densely (order-preserving), and expand the kept positive spans
/// into query-level char alignments. Sub-query span labels are rewritten to
/// the retained indices.
pub fn label_assign(
    placed: Vec<PlacedSubQuery>,
    boxes: &[BoundingBox],
) -> (Vec<PlacedSubQuery>, Vec<BoundingBox>, Vec<CharAlignment>) {
    let mut survivors: Vec<usize> = placed
        .iter()
        .filter(|p| p.sub.positive)
        .flat_map(|p| p.sub.span_labels.iter())
        .flat_map(|label| label.box_indices.iter().copied())
        .collect();
    survivors.sort_unstable();
    survivors.dedup();

    let remap: HashMap<usize, usize> = survivors
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let retained: Vec<BoundingBox> = survivors.iter().map(|&old| boxes[old]).collect();

    let mut alignments = Vec::new();
    let placed: Vec<PlacedSubQuery> = placed
        .into_iter()
        .map(|mut p| {
            for label in &mut p.sub.span_labels {
                for b in &mut label.box_indices {
                    *b = remap[b];
                }
                let global = label.span.shifted(p.offset);
                for &b in &label.box_indices {
                    alignments.push(CharAlignment {
                        span: global,
                        box_index: b,
                    });
                }
            }
            p
        })
        .collect();
    (placed, retained, alignments)
}

fn prefix_tokens(cfg: &GenConfig, tokenizer: &Tokenizer) -> usize {
    if cfg.detect_prefix {
        tokenizer.count_tokens("Detect: ")
    } else {
        0
    }
}

/// Prepend the "Detect: " prefix, shifting offsets and alignment spans.
fn apply_prefix(
    pack: PackedQuery,
    alignments: Vec<CharAlignment>,
) -> (PackedQuery, Vec<CharAlignment>) {
    const PREFIX: &str = "Detect: ";
    let shift = PREFIX.chars().count();
    let text = format!("{}{}", PREFIX, pack.text);
    let placed = pack
        .placed
        .into_iter()
        .map(|mut p| {
            p.offset += shift;
            p
        })
        .collect();
    let alignments = alignments
        .into_iter()
        .map(|mut a| {
            a.span = a.span.shifted(shift);
            a
        })
        .collect();
    (PackedQuery { placed, text }, alignments)
}

fn finish_query(
    image_id: &str,
    seed: u64,
    cfg: &GenConfig,
    pack: PackedQuery,
    boxes: &[BoundingBox],
    with_prefix: bool,
) -> ComposedQuery {
    let (placed, retained, alignments) = label_assign(pack.placed, boxes);
    let pack = PackedQuery {
        placed,
        text: pack.text,
    };
    let (pack, alignments) = if with_prefix && cfg.detect_prefix {
        apply_prefix(pack, alignments)
    } else {
        (pack, alignments)
    };
    ComposedQuery {
        image_id: image_id.to_string(),
        text: pack.text,
        sub_queries: pack.placed,
        retained_boxes: retained,
        char_alignments: alignments,
        seed,
    }
}

fn empty_query(image_id: &str, seed: u64) -> ComposedQuery {
    ComposedQuery {
        image_id: image_id.to_string(),
        text: String::new(),
        sub_queries: Vec::new(),
        retained_boxes: Vec::new(),
        char_alignments: Vec::new(),
        seed,
    }
}

/// Description-conditioned query for detection data.
///
/// Per positive entity: a description sub-query plus confusable-object
/// description sub-queries, with the entity name dropped from both at
/// probability `p_drop`; random vocabulary negatives appended; then packing
/// and label assignment. Entities without a described vocab entry degrade
/// to plain name sub-queries.
pub fn gen_detection_query(
    sample: &DetectionSample,
    vocab: &Vocabulary,
    cfg: &GenConfig,
    tokenizer: &Tokenizer,
) -> ComposedQuery {
    let seed = derive_seed(cfg.seed, &sample.image_id, "detection");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<SubQuery> = Vec::new();
    let mut used: HashSet<String> = HashSet::new();

    for (i, entity) in sample.entities.iter().enumerate() {
        used.insert(normalize_phrase(entity));
        let boxes = sample.boxes_of_entity(i);
        match vocab.lookup(entity) {
            Some(entry) if !entry.description.is_empty() => {
                let keep_name = rng.gen::<f64>() >= cfg.p_drop;
                let positive = render_description_subquery(entry, keep_name);
                candidates.push(strip_trailing_period(attach_boxes(positive, &boxes)));
                let n_conf = cfg.n_confusables.unwrap_or(entry.similar_objects.len());
                for similar in entry.similar_objects.iter().take(n_conf) {
                    match vocab.lookup(similar) {
                        Some(sim_entry) if !sim_entry.description.is_empty() => {
                            used.insert(normalize_phrase(similar));
                            candidates.push(strip_trailing_period(render_confusable_subquery(
                                sim_entry, keep_name,
                            )));
                        }
                        _ => {
                            log::debug!("no description for confusable {similar:?}, skipped");
                        }
                    }
                }
            }
            _ => {
                candidates.push(plain_entity_subquery(entity, boxes));
            }
        }
    }

    let n_random = cfg.n_random_negatives * sample.entities.len();
    if n_random > 0 {
        let pool: Vec<&VocabEntry> = vocab
            .entries()
            .iter()
            .filter(|e| !used.contains(&normalize_phrase(&e.entity)))
            .collect();
        for entry in pool.choose_multiple(&mut rng, n_random) {
            candidates.push(strip_trailing_period(render_random_negative(entry)));
        }
    }

    if candidates.is_empty() {
        return empty_query(&sample.image_id, seed);
    }
    let mut budgeted = cfg.clone();
    budgeted.max_query_tokens = cfg.max_query_tokens - prefix_tokens(cfg, tokenizer);
    let pack = subsample_concat(candidates, &budgeted, tokenizer, &mut rng);
    finish_query(&sample.image_id, seed, cfg, pack, &sample.boxes, true)
}

/// Reinterpret a grounding sample as detection data: phrase surface forms
/// become entities (normalized, deduplicated, first claim on a box wins);
/// boxes left unclaimed and entities left without boxes are dropped.
pub fn detection_sample_from_grounding(sample: &GroundingSample) -> DetectionSample {
    let mut entities: Vec<String> = Vec::new();
    let mut entity_index: HashMap<String, usize> = HashMap::new();
    let mut claims: Vec<Option<usize>> = vec![None; sample.boxes.len()];

    for phrase in &sample.phrases {
        let surface = phrase.span.slice(&sample.caption);
        let name = normalize_phrase(surface);
        if name.is_empty() {
            continue;
        }
        let idx = *entity_index.entry(name.clone()).or_insert_with(|| {
            entities.push(name);
            entities.len() - 1
        });
        for &b in &phrase.box_indices {
            if claims[b].is_none() {
                claims[b] = Some(idx);
            }
        }
    }

    let mut boxes = Vec::new();
    let mut box_entity_old = Vec::new();
    for (b, claim) in claims.iter().enumerate() {
        if let Some(e) = claim {
            boxes.push(sample.boxes[b]);
            box_entity_old.push(*e);
        }
    }
    // Compact entities that lost every box to an earlier claimant.
    let mut new_index: HashMap<usize, usize> = HashMap::new();
    let mut kept_entities = Vec::new();
    let mut box_entity = Vec::with_capacity(box_entity_old.len());
    for &old in &box_entity_old {
        let new = *new_index.entry(old).or_insert_with(|| {
            kept_entities.push(entities[old].clone());
            kept_entities.len() - 1
        });
        box_entity.push(new);
    }
    DetectionSample {
        image_id: sample.image_id.clone(),
        image_size: None,
        boxes,
        box_entity,
        entities: kept_entities,
    }
}

fn caption_subquery(sample: &GroundingSample) -> SubQuery {
    let sub = SubQuery {
        text: sample.caption.clone(),
        kind: SubQueryKind::PositiveCaption,
        source_entity: None,
        positive: true,
        span_labels: sample
            .phrases
            .iter()
            .map(|p| SpanLabel {
                span: p.span,
                box_indices: p.box_indices.clone(),
            })
            .collect(),
    };
    strip_trailing_period(sub)
}

fn negative_caption_subquery(caption: &str) -> SubQuery {
    strip_trailing_period(SubQuery {
        text: caption.to_string(),
        kind: SubQueryKind::NegativeCaption,
        source_entity: None,
        positive: false,
        span_labels: Vec::new(),
    })
}

/// Description-conditioned query for grounding data.
///
/// With probability `p_des` the sample is routed through
/// [`gen_detection_query`] on its derived detection sample. Otherwise the
/// positive caption is packed with its hard negative captions; the positive
/// caption is dropped with probability `p_drop` (when negatives exist),
/// which yields a full-negative query.
pub fn gen_grounding_query(
    sample: &GroundingSample,
    vocab: &Vocabulary,
    negatives: &HashMap<String, Vec<String>>,
    cfg: &GenConfig,
    tokenizer: &Tokenizer,
) -> ComposedQuery {
    let seed = derive_seed(cfg.seed, &sample.image_id, "grounding");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if rng.gen::<f64>() < cfg.p_des {
        let derived = detection_sample_from_grounding(sample);
        return gen_detection_query(&derived, vocab, cfg, tokenizer);
    }

    let negs: &[String] = negatives
        .get(&sample.caption)
        .map(Vec::as_slice)
        .unwrap_or_default();
    let drop_positive = !negs.is_empty() && rng.gen::<f64>() < cfg.p_drop;

    let mut candidates = Vec::new();
    if !drop_positive {
        candidates.push(caption_subquery(sample));
    }
    for neg in negs {
        candidates.push(negative_caption_subquery(neg));
    }
    if candidates.is_empty() {
        candidates.push(caption_subquery(sample));
    }
    let pack = subsample_concat(candidates, cfg, tokenizer, &mut rng);
    finish_query(&sample.image_id, seed, cfg, pack, &sample.boxes, false)
}

/// Baseline detection query: a shuffle of all positive entity names plus
/// random negative names from the vocabulary. No positive is ever dropped
/// and all boxes are always retained; negatives are capped to the budget.
pub fn gen_glip_detection_query(
    sample: &DetectionSample,
    vocab: &Vocabulary,
    cfg: &GenConfig,
    tokenizer: &Tokenizer,
) -> ComposedQuery {
    let seed = derive_seed(cfg.seed, &sample.image_id, "glip-detection");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let positive_names: HashSet<String> = sample
        .entities
        .iter()
        .map(|e| normalize_phrase(e))
        .collect();
    let mut items: Vec<SubQuery> = sample
        .entities
        .iter()
        .enumerate()
        .map(|(i, entity)| plain_entity_subquery(entity, sample.boxes_of_entity(i)))
        .collect();

    let n_random = cfg.n_random_negatives * sample.entities.len();
    if n_random > 0 {
        let pool: Vec<&VocabEntry> = vocab
            .entries()
            .iter()
            .filter(|e| !positive_names.contains(&normalize_phrase(&e.entity)))
            .collect();
        for entry in pool.choose_multiple(&mut rng, n_random) {
            items.push(SubQuery {
                text: entry.entity.clone(),
                kind: SubQueryKind::RandomNegative,
                source_entity: Some(entry.entity.clone()),
                positive: false,
                span_labels: Vec::new(),
            });
        }
    }
    if items.is_empty() {
        return empty_query(&sample.image_id, seed);
    }
    items.shuffle(&mut rng);

    // Positives are kept unconditionally; negatives fill whatever budget
    // remains after all positives are accounted for.
    let budget = cfg.max_query_tokens - prefix_tokens(cfg, tokenizer);
    let mut total: usize = items
        .iter()
        .filter(|s| s.positive)
        .map(|s| unit_cost(s, tokenizer))
        .sum();
    let mut kept = Vec::with_capacity(items.len());
    for sub in items {
        if sub.positive {
            kept.push(sub);
        } else {
            let cost = unit_cost(&sub, tokenizer);
            if total + cost <= budget {
                total += cost;
                kept.push(sub);
            }
        }
    }
    let pack = concat_units(kept);
    finish_query(&sample.image_id, seed, cfg, pack, &sample.boxes, true)
}

/// Baseline grounding query: the positive caption is always included,
/// padded with randomly sampled other captions from the corpus; all boxes
/// retained.
pub fn gen_glip_grounding_query(
    sample: &GroundingSample,
    caption_corpus: &[String],
    cfg: &GenConfig,
    tokenizer: &Tokenizer,
) -> ComposedQuery {
    let seed = derive_seed(cfg.seed, &sample.image_id, "glip-grounding");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut items = vec![caption_subquery(sample)];
    if cfg.n_random_negatives > 0 {
        let pool: Vec<&String> = caption_corpus
            .iter()
            .filter(|c| **c != sample.caption)
            .collect();
        for caption in pool.choose_multiple(&mut rng, cfg.n_random_negatives) {
            let mut sub = negative_caption_subquery(caption);
            sub.kind = SubQueryKind::RandomNegative;
            items.push(sub);
        }
    }
    items.shuffle(&mut rng);

    let budget = cfg.max_query_tokens;
    let mut total: usize = items
        .iter()
        .filter(|s| s.positive)
        .map(|s| unit_cost(s, tokenizer))
        .sum();
    let mut kept = Vec::with_capacity(items.len());
    for sub in items {
        if sub.positive {
            kept.push(sub);
        } else {
            let cost = unit_cost(&sub, tokenizer);
            if total + cost <= budget {
                total += cost;
                kept.push(sub);
            }
        }
    }
    let pack = concat_units(kept);
    finish_query(&sample.image_id, seed, cfg, pack, &sample.boxes, false)
}

/// Inference queries for a category taxonomy: one named description
/// sub-query per category, chunked deterministically (no shuffling) into
/// queries under the token budget. Every category appears exactly once and
/// no query carries boxes.
pub fn gen_eval_queries(
    categories: &[(String, VocabEntry)],
    cfg: &GenConfig,
    tokenizer: &Tokenizer,
) -> Vec<ComposedQuery> {
    let budget = cfg.max_query_tokens;
    let mut queries = Vec::new();
    let mut current: Vec<SubQuery> = Vec::new();
    let mut total = 0usize;

    let flush = |current: &mut Vec<SubQuery>, queries: &mut Vec<ComposedQuery>| {
        if current.is_empty() {
            return;
        }
        let pack = concat_units(std::mem::take(current));
        let query = ComposedQuery {
            image_id: format!("eval-{}", queries.len()),
            text: pack.text,
            sub_queries: pack.placed,
            retained_boxes: Vec::new(),
            char_alignments: Vec::new(),
            seed: cfg.seed,
        };
        queries.push(query);
    };

    for (name, entry) in categories {
        let sub = if entry.description.is_empty() {
            plain_entity_subquery(name, Vec::new())
        } else {
            let named = VocabEntry {
                entity: name.clone(),
                ..entry.clone()
            };
            strip_trailing_period(render_description_subquery(&named, true))
        };
        let mut cost = unit_cost(&sub, tokenizer);
        let sub = if cost > budget {
            let truncated = truncate_subquery(sub, tokenizer, budget);
            cost = unit_cost(&truncated, tokenizer);
            truncated
        } else {
            sub
        };
        if total + cost > budget {
            flush(&mut current, &mut queries);
            total = 0;
        }
        total += cost;
        current.push(sub);
    }
    flush(&mut current, &mut queries);
    queries
}
