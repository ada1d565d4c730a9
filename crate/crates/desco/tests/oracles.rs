//! Independent oracles for the matching and alignment machinery.
//!
//! Each oracle recomputes the expected result by a different route (full
//! enumeration, brute-force overlap scans) and never calls into the code
//! path it checks.

use desco::eval::{iou, match_predictions};
use desco::model::{
    BoundingBox, CharAlignment, CharSpan, ComposedQuery, Prediction,
};
use desco::tokenize::{build_alignment_matrix, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let x1 = rng.gen_range(0..20) as f64;
    let y1 = rng.gen_range(0..20) as f64;
    let w = rng.gen_range(1..15) as f64;
    let h = rng.gen_range(1..15) as f64;
    BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn random_preds(rng: &mut ChaCha8Rng, max: usize) -> Vec<Prediction> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| Prediction {
            bbox: random_box(rng),
            confidence: rng.gen_range(0..=100) as f64 / 100.0,
            label: None,
        })
        .collect()
}

/// Enumerate every one-to-one matching (as index permutations of the
/// smaller side) and return the best total IoU over pairs above the
/// threshold.
fn optimal_matching_iou_sum(a: &[Prediction], b: &[Prediction], thr: f64) -> f64 {
    fn recurse(
        a: &[Prediction],
        b: &[Prediction],
        thr: f64,
        i: usize,
        used: &mut Vec<bool>,
        current: f64,
        best: &mut f64,
    ) {
        if i == a.len() {
            *best = best.max(current);
            return;
        }
        // leave a[i] unmatched
        recurse(a, b, thr, i + 1, used, current, best);
        for j in 0..b.len() {
            if used[j] {
                continue;
            }
            let overlap = iou(&a[i].bbox, &b[j].bbox);
            if overlap > thr {
                used[j] = true;
                recurse(a, b, thr, i + 1, used, current + overlap, best);
                used[j] = false;
            }
        }
    }
    let mut best = 0.0;
    let mut used = vec![false; b.len()];
    recurse(a, b, thr, 0, &mut used, 0.0, &mut best);
    best
}

/// Independent greedy re-implementation: repeatedly scan the full pair
/// matrix for the global maximum instead of sorting once.
fn greedy_rescan(a: &[Prediction], b: &[Prediction], thr: f64) -> Vec<(usize, usize)> {
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matches = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..a.len() {
            if used_a[i] {
                continue;
            }
            for j in 0..b.len() {
                if used_b[j] {
                    continue;
                }
                let overlap = iou(&a[i].bbox, &b[j].bbox);
                if overlap <= thr {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bo, bi, bj)) => {
                        overlap > bo || (overlap == bo && (i, j) < (bi, bj))
                    }
                };
                if better {
                    best = Some((overlap, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                used_a[i] = true;
                used_b[j] = true;
                matches.push((i, j));
            }
            None => break,
        }
    }
    matches
}

#[test]
fn greedy_matching_reproduced_by_independent_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let a = random_preds(&mut rng, 6);
        let b = random_preds(&mut rng, 6);
        let got = match_predictions(&a, &b, 0.5);
        let expect = greedy_rescan(&a, &b, 0.5);
        assert_eq!(got, expect, "a={a:?} b={b:?}");
    }
}

#[test]
fn greedy_matching_iou_sum_within_half_of_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..300 {
        let a = random_preds(&mut rng, 5);
        let b = random_preds(&mut rng, 5);
        let matches = match_predictions(&a, &b, 0.5);
        let greedy_sum: f64 = matches
            .iter()
            .map(|&(i, j)| iou(&a[i].bbox, &b[j].bbox))
            .sum();
        let optimal = optimal_matching_iou_sum(&a, &b, 0.5);
        assert!(
            greedy_sum >= optimal / 2.0 - 1e-12,
            "greedy {greedy_sum} below half of optimal {optimal}"
        );
        assert!(greedy_sum <= optimal + 1e-12);
    }
}

/// Hand-constructed case where greedy and optimal matchings genuinely
/// differ: greedy grabs the single largest overlap and sacrifices the
/// pairing that would maximize the total. The greedy result is asserted
/// verbatim against the enumeration oracle's numbers.
#[test]
fn greedy_differs_from_optimal_and_is_stable() {
    let p = |x1: f64, y1: f64, x2: f64, y2: f64| Prediction {
        bbox: BoundingBox::new(x1, y1, x2, y2).unwrap(),
        confidence: 0.9,
        label: None,
    };
    // IoUs: (a0,b0) = (a1,b0) = 9.5/10.5, (a0,b1) = 9/11, (a1,b1) = 81/119.
    // Greedy takes (a0,b0) on the index tie-break, forcing (a1,b1);
    // the optimal assignment is (a0,b1) + (a1,b0).
    let a = vec![p(0.0, 0.0, 10.0, 10.0), p(1.0, 0.0, 11.0, 10.0)];
    let b = vec![p(0.5, 0.0, 10.5, 10.0), p(0.0, 1.0, 10.0, 11.0)];

    let got = match_predictions(&a, &b, 0.5);
    assert_eq!(got, vec![(0, 0), (1, 1)]);
    assert_eq!(got, greedy_rescan(&a, &b, 0.5));

    let greedy_sum: f64 = got.iter().map(|&(i, j)| iou(&a[i].bbox, &b[j].bbox)).sum();
    let optimal = optimal_matching_iou_sum(&a, &b, 0.5);
    let expected_greedy = 9.5 / 10.5 + 81.0 / 119.0;
    let expected_optimal = 9.0 / 11.0 + 9.5 / 10.5;
    assert!((greedy_sum - expected_greedy).abs() < 1e-12);
    assert!((optimal - expected_optimal).abs() < 1e-12);
    assert!(greedy_sum < optimal);
    assert!(greedy_sum >= optimal / 2.0);
}

/// IoU against a unit-cell counting oracle on integer boxes.
#[test]
fn iou_matches_cell_counting_on_integer_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let mut inter = 0u64;
        let mut union = 0u64;
        for x in 0..40 {
            for y in 0..40 {
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
        let expected = inter as f64 / union as f64;
        assert!(
            (iou(&a, &b) - expected).abs() < 1e-9,
            "a={a:?} b={b:?} got={} want={expected}",
            iou(&a, &b)
        );
    }
}

fn query_with_alignments() -> ComposedQuery {
    // "a kind of tool, wooden handle. a kind of tool, long blade."
    //  box 0 aligned to the whole first sub-query span [0, 29).
    let text = "a kind of tool, wooden handle. a kind of tool, long blade.".to_string();
    ComposedQuery {
        image_id: "img".into(),
        text,
        sub_queries: vec![],
        retained_boxes: vec![BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap()],
        char_alignments: vec![CharAlignment {
            span: CharSpan::new(0, 29),
            box_index: 0,
        }],
        seed: 0,
    }
}

/// Brute-force bit recompute: bit(b, t) iff token t's span overlaps one of
/// box b's alignment spans, checked char by char.
fn brute_force_bits(q: &ComposedQuery, tokenizer: &Tokenizer) -> Vec<Vec<bool>> {
    let tokens = tokenizer.tokenize(&q.text);
    let mut bits = vec![vec![false; tokens.len()]; q.retained_boxes.len()];
    for (t, token) in tokens.iter().enumerate() {
        for a in &q.char_alignments {
            for c in token.span.start..token.span.end {
                if c >= a.span.start && c < a.span.end {
                    bits[a.box_index][t] = true;
                }
            }
        }
    }
    bits
}

#[test]
fn alignment_matrix_matches_brute_force_under_both_tokenizers() {
    let q = query_with_alignments();
    let word = Tokenizer::word();
    let sub = Tokenizer::subword_from_pieces(
        ["a", "kind", "of", "tool", "wood", "##en", "hand", "##le", "long", "blade", ",", "."],
        "[UNK]",
    );
    for tokenizer in [&word, &sub] {
        let matrix = build_alignment_matrix(&q, tokenizer, Some(256)).unwrap();
        let expect = brute_force_bits(&q, tokenizer);
        for (b, row) in expect.iter().enumerate() {
            for (t, &bit) in row.iter().enumerate() {
                assert_eq!(matrix.get(b, t), bit, "bit ({b}, {t})");
            }
            // row sums equal the brute-force count
            assert_eq!(matrix.row_sum(b), row.iter().filter(|&&x| x).count());
        }
    }
}

#[test]
fn word_tool_carries_both_labels_across_subqueries() {
    let q = query_with_alignments();
    let tok = Tokenizer::word();
    let matrix = build_alignment_matrix(&q, &tok, None).unwrap();
    let tokens = tok.tokenize(&q.text);
    let tool_positions: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.text == "tool")
        .map(|(i, _)| i)
        .collect();
    assert_eq!(tool_positions.len(), 2);
    assert!(matrix.get(0, tool_positions[0]), "first tool is labeled 1");
    assert!(!matrix.get(0, tool_positions[1]), "second tool is labeled 0");
}

#[test]
fn empty_retained_boxes_give_zero_row_matrix() {
    let q = ComposedQuery {
        image_id: "img".into(),
        text: "nothing positive here.".into(),
        sub_queries: vec![],
        retained_boxes: vec![],
        char_alignments: vec![],
        seed: 0,
    };
    let matrix = build_alignment_matrix(&q, &Tokenizer::word(), None).unwrap();
    assert_eq!(matrix.n_boxes(), 0);
    assert_eq!(matrix.n_tokens(), 4);
}

#[test]
fn budget_overflow_is_an_error() {
    let q = query_with_alignments();
    let err = build_alignment_matrix(&q, &Tokenizer::word(), Some(4)).unwrap_err();
    assert!(err.to_string().contains("exceeds budget"), "{err}");
}

/// End-to-end dual labeling: a grounding query packing the positive caption
/// with a hard negative that reuses the same entity word gives that word
/// both labels inside one image, which the audit reports as positive
/// conditional entropy.
#[test]
fn hard_negative_caption_gives_entity_word_both_labels() {
    use desco::eval::context_dependence_audit;
    use desco::model::{GroundingSample, Phrase};
    use desco::querygen::{gen_grounding_query, GenConfig, Vocabulary};
    use std::collections::HashMap;

    let caption = "A toy bear holding a mallet".to_string();
    let sample = GroundingSample {
        image_id: "bear-1".into(),
        caption: caption.clone(),
        phrases: vec![
            Phrase {
                span: CharSpan::new(2, 10),
                box_indices: vec![0],
            },
            Phrase {
                span: CharSpan::new(21, 27),
                box_indices: vec![1],
            },
        ],
        boxes: vec![
            BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            BoundingBox::new(20.0, 0.0, 30.0, 10.0).unwrap(),
        ],
    };
    let mut negatives = HashMap::new();
    negatives.insert(
        caption,
        vec!["A polar bear holding a mallet".to_string()],
    );
    let cfg = GenConfig {
        p_des: 0.0,
        p_drop: 0.0,
        seed: 4,
        ..Default::default()
    };
    let tok = Tokenizer::word_lowercase();
    let query = gen_grounding_query(&sample, &Vocabulary::new(vec![]), &negatives, &cfg, &tok);
    assert!(query.text.contains("A toy bear holding a mallet"));
    assert!(query.text.contains("A polar bear holding a mallet"));

    let report = context_dependence_audit([&query], &tok);
    let mallet = report.stats("mallet").expect("mallet tokenized");
    assert!(mallet.n_pos >= 1, "positive caption mallet labeled 1");
    assert!(mallet.n_neg >= 1, "negative caption mallet labeled 0");
    assert!(mallet.conditional_entropy_bits > 0.0);

    // the matrix view agrees: one mallet token per box-aligned span, one
    // unlabeled
    let matrix = build_alignment_matrix(&query, &tok, Some(256)).unwrap();
    let tokens = tok.tokenize(&query.text);
    let mallet_positions: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.text == "mallet")
        .map(|(i, _)| i)
        .collect();
    assert_eq!(mallet_positions.len(), 2);
    let labeled: Vec<bool> = mallet_positions
        .iter()
        .map(|&t| matrix.token_is_positive(t))
        .collect();
    assert_eq!(labeled.iter().filter(|&&x| x).count(), 1);
}
