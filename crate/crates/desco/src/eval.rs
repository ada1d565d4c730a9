//! Context-sensitivity evaluation: box matching, delta metrics, average
//! precision, context-pair construction, and the corpus label-entropy audit.
//!
//! Delta-box is oriented so that higher means the predictions changed more
//! between the positive and the confusable query: it is the fraction of
//! positive-query predictions left unmatched at the IoU threshold.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{
    BoundingBox, CharSpan, ComposedQuery, ModelError, Prediction, Validate, VocabEntry,
};
use crate::querygen::render_description_subquery;
use crate::tokenize::Tokenizer;

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy one-to-one matching between two prediction lists in descending
/// IoU order; pairs at or below `iou_thr` are excluded. Ties break on
/// (first index, second index) so the result is deterministic.
pub fn match_predictions(
    p_pos: &[Prediction],
    p_neg: &[Prediction],
    iou_thr: f64,
) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(p_pos.len() * p_neg.len());
    for (i, a) in p_pos.iter().enumerate() {
        for (j, b) in p_neg.iter().enumerate() {
            let overlap = iou(&a.bbox, &b.bbox);
            if overlap > iou_thr {
                pairs.push((overlap, i, j));
            }
        }
    }
    pairs.sort_by(|(ia, ai, aj), (ib, bi, bj)| {
        ib.partial_cmp(ia)
            .expect("IoU is finite")
            .then(ai.cmp(bi))
            .then(aj.cmp(bj))
    });
    let mut used_pos = vec![false; p_pos.len()];
    let mut used_neg = vec![false; p_neg.len()];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_pos[i] && !used_neg[j] {
            used_pos[i] = true;
            used_neg[j] = true;
            matches.push((i, j));
        }
    }
    matches
}

/// Fraction of positive-query predictions without a counterpart in the
/// negative-query predictions. Empty `p_pos` gives 0.
pub fn delta_box(p_pos: &[Prediction], p_neg: &[Prediction], iou_thr: f64) -> f64 {
    if p_pos.is_empty() {
        return 0.0;
    }
    let matched = match_predictions(p_pos, p_neg, iou_thr).len();
    1.0 - matched as f64 / p_pos.len() as f64
}

/// Mean absolute confidence change over matched box pairs; 0 when nothing
/// matched.
pub fn delta_conf(p_pos: &[Prediction], p_neg: &[Prediction], matches: &[(usize, usize)]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let total: f64 = matches
        .iter()
        .map(|&(i, j)| (p_pos[i].confidence - p_neg[j].confidence).abs())
        .sum();
    total / matches.len() as f64
}

/// Precision-recall integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApInterpolation {
    /// Area under the full precision envelope.
    AllPoint,
    /// Mean envelope precision at n evenly spaced recall points.
    Points(usize),
}

/// Average precision of `preds` against `gt` at one IoU threshold, using
/// all-point interpolation. Predictions are ranked by descending confidence
/// and each ground-truth box is matched at most once.
pub fn average_precision(preds: &[Prediction], gt: &[BoundingBox], iou_thr: f64) -> f64 {
    average_precision_with(preds, gt, iou_thr, ApInterpolation::AllPoint)
}

pub fn average_precision_with(
    preds: &[Prediction],
    gt: &[BoundingBox],
    iou_thr: f64,
    interp: ApInterpolation,
) -> f64 {
    if preds.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .expect("confidence is finite")
            .then(a.cmp(&b))
    });

    let mut gt_used = vec![false; gt.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for &p in &order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gbox) in gt.iter().enumerate() {
            if gt_used[g] {
                continue;
            }
            let overlap = iou(&preds[p].bbox, gbox);
            if overlap >= iou_thr && best.is_none_or(|(bo, _)| overlap > bo) {
                best = Some((overlap, g));
            }
        }
        match best {
            Some((_, g)) => {
                gt_used[g] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    integrate_pr_curve(&tp_flags, gt.len(), interp)
}

/// Turn ranked true-positive flags into a precision-recall curve and
/// integrate it under the chosen interpolation scheme.
fn integrate_pr_curve(tp_flags: &[bool], n_gt: usize, interp: ApInterpolation) -> f64 {
    let n_gt = n_gt as f64;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt);
    }
    // Precision envelope: running max from the right.
    let mut envelope = precisions;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }

    match interp {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for k in 0..envelope.len() {
                let dr = recalls[k] - prev_recall;
                if dr > 0.0 {
                    ap += dr * envelope[k];
                    prev_recall = recalls[k];
                }
            }
            ap
        }
        ApInterpolation::Points(n) => {
            assert!(n >= 2, "need at least 2 interpolation points");
            let mut total = 0.0;
            for i in 0..n {
                let r = i as f64 / (n - 1) as f64;
                // max precision at recall >= r
                let p = recalls
                    .iter()
                    .zip(&envelope)
                    .find(|(rec, _)| **rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .unwrap_or(0.0);
                total += p;
            }
            total / n as f64
        }
    }
}

/// Corpus AP: predictions from all images ranked together by confidence,
/// each matched greedily against its own image's unmatched ground truth.
pub fn corpus_average_precision(
    preds_by_image: &HashMap<String, Vec<Prediction>>,
    gt_by_image: &HashMap<String, Vec<BoundingBox>>,
    iou_thr: f64,
) -> f64 {
    corpus_average_precision_with(preds_by_image, gt_by_image, iou_thr, ApInterpolation::AllPoint)
}

pub fn corpus_average_precision_with(
    preds_by_image: &HashMap<String, Vec<Prediction>>,
    gt_by_image: &HashMap<String, Vec<BoundingBox>>,
    iou_thr: f64,
    interp: ApInterpolation,
) -> f64 {
    let n_gt: usize = gt_by_image.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(&String, &Prediction)> = preds_by_image
        .iter()
        .flat_map(|(image, preds)| preds.iter().map(move |p| (image, p)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidence is finite")
            .then(ia.cmp(ib))
    });

    let mut gt_used: HashMap<&String, Vec<bool>> = gt_by_image
        .iter()
        .map(|(image, boxes)| (image, vec![false; boxes.len()]))
        .collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (image, p) in &ranked {
        let mut matched = false;
        if let (Some(gts), Some(used)) = (gt_by_image.get(*image), gt_used.get_mut(image)) {
            let mut best: Option<(f64, usize)> = None;
            for (g, gbox) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let overlap = iou(&p.bbox, gbox);
                if overlap >= iou_thr && best.is_none_or(|(bo, _)| overlap > bo) {
                    best = Some((overlap, g));
                }
            }
            if let Some((_, g)) = best {
                used[g] = true;
                matched = true;
            }
        }
        tp_flags.push(matched);
    }
    integrate_pr_curve(&tp_flags, n_gt, interp)
}

/// A positive/negative query pair for one rare object in one image. Both
/// query texts are nameless descriptions; neither contains the target
/// entity's surface form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub image_id: String,
    pub q_pos: String,
    pub q_neg: String,
    pub target_entity: String,
    pub gt_boxes: Vec<BoundingBox>,
}

impl Validate for ContextPair {
    fn validate(&self) -> Result<(), ModelError> {
        for (field, text) in [("q_pos", &self.q_pos), ("q_neg", &self.q_neg)] {
            if contains_surface_form(text, &self.target_entity) {
                return Err(ModelError::validation(
                    "target_entity",
                    format!("{field} contains the target entity {:?}", self.target_entity),
                ));
            }
        }
        Ok(())
    }
}

/// Case-insensitive substring test used to keep entity names out of
/// nameless query texts.
pub fn contains_surface_form(text: &str, entity: &str) -> bool {
    if entity.is_empty() {
        return false;
    }
    text.to_lowercase().contains(&entity.to_lowercase())
}

/// Build context pairs for images with rare objects.
///
/// The positive query is the rare entity's nameless description; the
/// negative is the nameless description of the first similar object that
/// has one. Pairs whose texts would leak the target name, and entities
/// without a usable confusable, are skipped (and reported).
pub fn build_context_pairs(
    rare_objects: &[(String, String, Vec<BoundingBox>)],
    descriptions: &HashMap<String, VocabEntry>,
) -> (Vec<ContextPair>, Vec<(String, String)>) {
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (image_id, entity, gt_boxes) in rare_objects {
        let Some(entry) = descriptions.get(entity).filter(|e| !e.description.is_empty()) else {
            skipped.push((image_id.clone(), format!("no description for {entity:?}")));
            continue;
        };
        let confusable = entry.similar_objects.iter().find_map(|sim| {
            descriptions
                .get(sim)
                .filter(|e| !e.description.is_empty())
        });
        let Some(conf_entry) = confusable else {
            skipped.push((
                image_id.clone(),
                format!("no confusable description for {entity:?}"),
            ));
            continue;
        };
        let pair = ContextPair {
            image_id: image_id.clone(),
            q_pos: render_description_subquery(entry, false).text,
            q_neg: render_description_subquery(conf_entry, false).text,
            target_entity: entity.clone(),
            gt_boxes: gt_boxes.clone(),
        };
        match pair.validate() {
            Ok(()) => pairs.push(pair),
            Err(e) => {
                log::warn!("skipping leaky pair for {entity:?} on {image_id}: {e}");
                skipped.push((image_id.clone(), format!("name leak for {entity:?}")));
            }
        }
    }
    (pairs, skipped)
}

/// Averaged sensitivity metrics over a set of context pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub delta_box: f64,
    pub delta_conf: f64,
    pub ap: f64,
    pub n_pairs: usize,
}

impl Validate for SensitivityReport {
    fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("delta_box", self.delta_box),
            ("delta_conf", self.delta_conf),
            ("ap", self.ap),
        ] {
            if !v.is_finite() {
                return Err(ModelError::validation("report", format!("{name} not finite")));
            }
        }
        Ok(())
    }
}

/// Compute per-pair metrics and average them. `predictions` maps
/// `(image_id, query_id)` to the model's output for that query; query ids
/// follow the `"{target_entity}/pos"` / `"{target_entity}/neg"` convention.
/// Pairs with no positive-query predictions recorded count with
/// delta/ap = 0.
pub fn evaluate_sensitivity(
    pairs: &[ContextPair],
    predictions: &HashMap<(String, String), Vec<Prediction>>,
    iou_thr: f64,
) -> SensitivityReport {
    let empty: Vec<Prediction> = Vec::new();
    let mut sum_box = 0.0;
    let mut sum_conf = 0.0;
    let mut sum_ap = 0.0;
    for pair in pairs {
        let pos_key = (pair.image_id.clone(), format!("{}/pos", pair.target_entity));
        let neg_key = (pair.image_id.clone(), format!("{}/neg", pair.target_entity));
        let p_pos = predictions.get(&pos_key).unwrap_or(&empty);
        let p_neg = predictions.get(&neg_key).unwrap_or(&empty);
        let matches = match_predictions(p_pos, p_neg, iou_thr);
        sum_box += delta_box(p_pos, p_neg, iou_thr);
        sum_conf += delta_conf(p_pos, p_neg, &matches);
        sum_ap += average_precision(p_pos, &pair.gt_boxes, iou_thr);
    }
    let n = pairs.len().max(1) as f64;
    SensitivityReport {
        delta_box: sum_box / n,
        delta_conf: sum_conf / n,
        ap: sum_ap / n,
        n_pairs: pairs.len(),
    }
}

/// Label statistics for one token surface form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceStats {
    pub n_pos: u64,
    pub n_neg: u64,
    /// Entropy of the label conditioned on the image: the occurrence-weighted
    /// mean of the per-image binary label entropy. Zero means the label is
    /// fully determined by (surface form, image), i.e. the surrounding query
    /// context carries no label information.
    pub conditional_entropy_bits: f64,
}

#[derive(Debug, Clone, Default)]
struct SurfaceCounts {
    // per image: (positive occurrences, negative occurrences)
    per_image: HashMap<String, (u64, u64)>,
}

/// Streaming accumulator for the context-dependence audit. Mergeable, so
/// shards can be audited in parallel and reduced.
#[derive(Debug, Default)]
pub struct AuditAccumulator {
    surfaces: HashMap<String, SurfaceCounts>,
    queries_seen: u64,
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

impl AuditAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tokenize the query and count each token occurrence as positive iff
    /// its span overlaps a positive char alignment.
    pub fn add_query(&mut self, query: &ComposedQuery, tokenizer: &Tokenizer) {
        self.queries_seen += 1;
        let tokens = tokenizer.tokenize(&query.text);
        let positive_spans: Vec<CharSpan> =
            query.char_alignments.iter().map(|a| a.span).collect();
        for token in tokens {
            let positive = positive_spans.iter().any(|s| s.overlaps(&token.span));
            let counts = self
                .surfaces
                .entry(token.text)
                .or_default()
                .per_image
                .entry(query.image_id.clone())
                .or_insert((0, 0));
            if positive {
                counts.0 += 1;
            } else {
                counts.1 += 1;
            }
        }
    }

    pub fn merge(&mut self, other: AuditAccumulator) {
        self.queries_seen += other.queries_seen;
        for (surface, counts) in other.surfaces {
            let entry = self.surfaces.entry(surface).or_default();
            for (image, (p, n)) in counts.per_image {
                let slot = entry.per_image.entry(image).or_insert((0, 0));
                slot.0 += p;
                slot.1 += n;
            }
        }
    }

    pub fn finish(self) -> AuditReport {
        let mut per_surface = BTreeMap::new();
        let mut weighted_entropy = 0.0;
        let mut total_occurrences = 0u64;
        for (surface, counts) in self.surfaces {
            let mut n_pos = 0u64;
            let mut n_neg = 0u64;
            let mut entropy_sum = 0.0;
            let mut occurrences = 0u64;
            for (p, n) in counts.per_image.values() {
                let total = p + n;
                n_pos += p;
                n_neg += n;
                occurrences += total;
                entropy_sum += total as f64 * binary_entropy(*p as f64 / total as f64);
            }
            let conditional_entropy_bits = if occurrences > 0 {
                entropy_sum / occurrences as f64
            } else {
                0.0
            };
            weighted_entropy += conditional_entropy_bits * occurrences as f64;
            total_occurrences += occurrences;
            per_surface.insert(
                surface,
                SurfaceStats {
                    n_pos,
                    n_neg,
                    conditional_entropy_bits,
                },
            );
        }
        AuditReport {
            per_surface,
            mean_entropy_bits: if total_occurrences > 0 {
                weighted_entropy / total_occurrences as f64
            } else {
                0.0
            },
            total_token_occurrences: total_occurrences,
            queries_seen: self.queries_seen,
        }
    }
}

/// Corpus-level audit output: per-surface-form label statistics plus the
/// occurrence-weighted mean conditional entropy.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub per_surface: BTreeMap<String, SurfaceStats>,
    pub mean_entropy_bits: f64,
    pub total_token_occurrences: u64,
    pub queries_seen: u64,
}

impl AuditReport {
    pub fn stats(&self, surface: &str) -> Option<&SurfaceStats> {
        self.per_surface.get(surface)
    }

    /// Surface forms that carry context information (entropy > 0), most
    /// context-dependent first.
    pub fn context_dependent_surfaces(&self) -> Vec<(&str, &SurfaceStats)> {
        let mut rows: Vec<(&str, &SurfaceStats)> = self
            .per_surface
            .iter()
            .filter(|(_, s)| s.conditional_entropy_bits > 0.0)
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        rows.sort_by(|a, b| {
            b.1.conditional_entropy_bits
                .partial_cmp(&a.1.conditional_entropy_bits)
                .expect("entropy is finite")
                .then(a.0.cmp(b.0))
        });
        rows
    }
}

/// Audit a whole corpus in one call.
pub fn context_dependence_audit<'a, I>(corpus: I, tokenizer: &Tokenizer) -> AuditReport
where
    I: IntoIterator<Item = &'a ComposedQuery>,
{
    let mut acc = AuditAccumulator::new();
    for query in corpus {
        acc.add_query(query, tokenizer);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CharAlignment, PlacedSubQuery, SpanLabel, SubQuery, SubQueryKind};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn pred(x1: f64, y1: f64, x2: f64, y2: f64, conf: f64) -> Prediction {
        Prediction {
            bbox: bb(x1, y1, x2, y2),
            confidence: conf,
            label: None,
        }
    }

    #[test]
    fn iou_identity_disjoint_and_hand_case() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bb(100.0, 100.0, 110.0, 110.0);
        assert_eq!(iou(&a, &far), 0.0);
        // Hand-computed: intersection 25, union 175.
        let b = bb(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    // Cross-check 1/7 by counting unit pixel cells.
    #[test]
    fn iou_hand_case_matches_pixel_grid() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 5.0, 15.0, 15.0);
        let mut inter = 0u32;
        let mut union = 0u32;
        for x in 0..20 {
            for y in 0..20 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_a = cx > a.x1 && cx < a.x2 && cy > a.y1 && cy < a.y2;
                let in_b = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        assert!((iou(&a, &b) - inter as f64 / union as f64).abs() < 1e-12);
    }

    #[test]
    fn matching_identical_lists_is_full() {
        let preds = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(20.0, 20.0, 30.0, 30.0, 0.8),
        ];
        let m = match_predictions(&preds, &preds, 0.5);
        assert_eq!(m.len(), 2);
        assert!(m.contains(&(0, 0)) && m.contains(&(1, 1)));
    }

    #[test]
    fn matching_empty_side_gives_no_pairs() {
        let preds = vec![pred(0.0, 0.0, 10.0, 10.0, 0.9)];
        assert!(match_predictions(&preds, &[], 0.5).is_empty());
    }

    #[test]
    fn delta_box_identity_and_disjoint() {
        let preds = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(20.0, 20.0, 30.0, 30.0, 0.8),
            pred(50.0, 50.0, 60.0, 60.0, 0.7),
        ];
        assert_eq!(delta_box(&preds, &preds, 0.5), 0.0);
        let far: Vec<Prediction> = preds
            .iter()
            .map(|p| pred(p.bbox.x1 + 500.0, p.bbox.y1, p.bbox.x2 + 500.0, p.bbox.y2, 0.5))
            .collect();
        assert_eq!(delta_box(&preds, &far, 0.5), 1.0);
        assert_eq!(delta_box(&[], &preds, 0.5), 0.0);
    }

    #[test]
    fn delta_box_counts_unmatched_thirds() {
        let p_pos = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(20.0, 20.0, 30.0, 30.0, 0.8),
            pred(50.0, 50.0, 60.0, 60.0, 0.7),
        ];
        let p_neg = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.5),
            pred(20.0, 20.0, 30.0, 30.0, 0.5),
        ];
        assert!((delta_box(&p_pos, &p_neg, 0.5) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn delta_conf_mean_absolute_change() {
        let p_pos = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(20.0, 20.0, 30.0, 30.0, 0.5),
        ];
        let p_neg = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.8),
            pred(20.0, 20.0, 30.0, 30.0, 0.7),
        ];
        let matches = match_predictions(&p_pos, &p_neg, 0.5);
        assert!((delta_conf(&p_pos, &p_neg, &matches) - 0.15).abs() < 1e-12);
        assert_eq!(delta_conf(&p_pos, &p_neg, &[]), 0.0);
        assert_eq!(delta_conf(&p_pos, &p_pos, &match_predictions(&p_pos, &p_pos, 0.5)), 0.0);
    }

    #[test]
    fn ap_trivial_and_hand_cases() {
        let gt = vec![bb(0.0, 0.0, 10.0, 10.0)];
        let hit = vec![pred(0.0, 0.0, 10.0, 10.0, 0.9)];
        assert_eq!(average_precision(&hit, &gt, 0.5), 1.0);
        assert_eq!(average_precision(&[], &gt, 0.5), 0.0);
        // Higher-confidence false positive, then a true positive: the
        // envelope is 0.5 across all recall.
        let preds = vec![
            pred(200.0, 200.0, 210.0, 210.0, 0.9),
            pred(0.0, 0.0, 10.0, 10.0, 0.8),
        ];
        assert_eq!(average_precision(&preds, &gt, 0.5), 0.5);
    }

    #[test]
    fn context_pair_rejects_name_leak() {
        let pair = ContextPair {
            image_id: "i".into(),
            q_pos: "a kind of tool, has a mallet head".into(),
            q_neg: "a kind of tool, sharp".into(),
            target_entity: "mallet".into(),
            gt_boxes: vec![],
        };
        assert!(pair.validate().is_err());
    }

    fn desc(entity: &str, type_name: &str, description: &str, similar: &[&str]) -> VocabEntry {
        VocabEntry {
            entity: entity.into(),
            type_name: type_name.into(),
            description: description.into(),
            similar_objects: similar.iter().map(|s| s.to_string()).collect(),
            frequency_rank: 0,
        }
    }

    #[test]
    fn builds_pairs_from_rare_objects() {
        let mut descriptions = HashMap::new();
        descriptions.insert(
            "mallet".to_string(),
            desc("mallet", "tool", "wooden handle with a round head", &["ax"]),
        );
        descriptions.insert(
            "ax".to_string(),
            desc("ax", "tool", "long handle and a sharp blade", &["mallet"]),
        );
        let rare = vec![(
            "img-1".to_string(),
            "mallet".to_string(),
            vec![bb(0.0, 0.0, 10.0, 10.0)],
        )];
        let (pairs, skipped) = build_context_pairs(&rare, &descriptions);
        assert!(skipped.is_empty());
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].q_pos, "a kind of tool, wooden handle with a round head");
        assert_eq!(pairs[0].q_neg, "a kind of tool, long handle and a sharp blade");
        assert!(!pairs[0].q_pos.contains("mallet"));
        assert!(!pairs[0].q_neg.contains("mallet"));
    }

    #[test]
    fn skips_entities_without_confusable_description() {
        let mut descriptions = HashMap::new();
        descriptions.insert(
            "mallet".to_string(),
            desc("mallet", "tool", "wooden handle", &["unknown thing"]),
        );
        let rare = vec![("img-1".to_string(), "mallet".to_string(), vec![])];
        let (pairs, skipped) = build_context_pairs(&rare, &descriptions);
        assert!(pairs.is_empty());
        assert_eq!(skipped.len(), 1);
    }

    /// Hand-built query: one positive sub-query aligned to one box, one
    /// negative sub-query.
    fn audit_query(image_id: &str, pos_text: &str, neg_text: &str) -> ComposedQuery {
        let pos_len = pos_text.chars().count();
        let neg_off = pos_len + 2;
        let text = format!("{pos_text}. {neg_text}.");
        ComposedQuery {
            image_id: image_id.to_string(),
            text,
            sub_queries: vec![
                PlacedSubQuery {
                    offset: 0,
                    sub: SubQuery {
                        text: pos_text.to_string(),
                        kind: SubQueryKind::EntityDescription,
                        source_entity: None,
                        positive: true,
                        span_labels: vec![SpanLabel {
                            span: CharSpan::new(0, pos_len),
                            box_indices: vec![0],
                        }],
                    },
                },
                PlacedSubQuery {
                    offset: neg_off,
                    sub: SubQuery {
                        text: neg_text.to_string(),
                        kind: SubQueryKind::ConfusableDescription,
                        source_entity: None,
                        positive: false,
                        span_labels: vec![],
                    },
                },
            ],
            retained_boxes: vec![bb(0.0, 0.0, 10.0, 10.0)],
            char_alignments: vec![CharAlignment {
                span: CharSpan::new(0, pos_len),
                box_index: 0,
            }],
            seed: 0,
        }
    }

    #[test]
    fn audit_detects_dual_labels_within_one_image() {
        let q = audit_query("img-1", "tool with handle", "tool with blade");
        let report = context_dependence_audit([&q], &Tokenizer::word_lowercase());
        let stats = report.stats("tool").unwrap();
        assert!(stats.n_pos >= 1 && stats.n_neg >= 1);
        assert!(stats.conditional_entropy_bits > 0.0);
        // 1 positive + 1 negative in the same image: a full bit.
        assert!((stats.conditional_entropy_bits - 1.0).abs() < 1e-12);
    }

    #[test]
    fn audit_cross_image_pure_labels_have_zero_conditional_entropy() {
        // "cat" positive in image A, negative in image B: pooled counts are
        // mixed but each image is pure, so the conditional entropy is 0.
        let qa = audit_query("img-a", "cat", "dog");
        let qb = audit_query("img-b", "dog", "cat");
        let report = context_dependence_audit([&qa, &qb], &Tokenizer::word_lowercase());
        let stats = report.stats("cat").unwrap();
        assert_eq!(stats.n_pos, 1);
        assert_eq!(stats.n_neg, 1);
        assert_eq!(stats.conditional_entropy_bits, 0.0);
        assert!(report.context_dependent_surfaces().is_empty());
    }

    #[test]
    fn audit_merge_equals_single_pass() {
        let qa = audit_query("img-a", "tool handle", "tool blade");
        let qb = audit_query("img-b", "round fruit", "long fruit");
        let tok = Tokenizer::word_lowercase();
        let single = context_dependence_audit([&qa, &qb], &tok);

        let mut left = AuditAccumulator::new();
        left.add_query(&qa, &tok);
        let mut right = AuditAccumulator::new();
        right.add_query(&qb, &tok);
        left.merge(right);
        let merged = left.finish();
        assert_eq!(merged.per_surface, single.per_surface);
        assert_eq!(merged.mean_entropy_bits, single.mean_entropy_bits);
    }
}

#[cfg(test)]
mod symmetry_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Continuous coordinates keep IoU values tie-free, where greedy
    // matching is orientation-independent.
    fn continuous_preds(rng: &mut ChaCha8Rng, n: usize) -> Vec<Prediction> {
        (0..n)
            .map(|_| {
                let x1 = rng.gen::<f64>() * 30.0;
                let y1 = rng.gen::<f64>() * 30.0;
                let w = 1.0 + rng.gen::<f64>() * 15.0;
                let h = 1.0 + rng.gen::<f64>() * 15.0;
                Prediction {
                    bbox: BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                    confidence: rng.gen(),
                    label: None,
                }
            })
            .collect()
    }

    #[test]
    fn delta_box_is_symmetric_for_equal_sized_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(555);
        for _ in 0..300 {
            let n = rng.gen_range(1..=6);
            let a = continuous_preds(&mut rng, n);
            let b = continuous_preds(&mut rng, n);
            let forward = delta_box(&a, &b, 0.5);
            let backward = delta_box(&b, &a, 0.5);
            assert!(
                (forward - backward).abs() < 1e-12,
                "delta_box not symmetric: {forward} vs {backward}"
            );
        }
    }
}
