//! Round-trip and invariant properties for every JSONL record kind.

use desco::jsonl::{from_json_line, to_json_line};
use desco::model::{
    BoundingBox, CharSpan, ComposedQuery, DetectionSample, GroundingSample, ModelError,
    NegativeCaptionRecord, Phrase, Prediction, PredictionRecord, Validate, VocabEntry,
};
use desco::querygen::{gen_detection_query, GenConfig, Vocabulary};
use desco::tokenize::Tokenizer;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-zéü]{1,8}".prop_map(|s| s)
}

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0u32..1000, 0u32..1000, 1u32..500, 1u32..500).prop_map(|(x, y, w, h)| {
        BoundingBox::new(
            x as f64 / 10.0,
            y as f64 / 10.0,
            x as f64 / 10.0 + w as f64 / 10.0,
            y as f64 / 10.0 + h as f64 / 10.0,
        )
        .unwrap()
    })
}

fn detection_sample() -> impl Strategy<Value = DetectionSample> {
    (
        "[a-z0-9-]{1,10}",
        prop::collection::vec(word(), 1..4),
        prop::collection::vec(bbox(), 4),
    )
        .prop_map(|(image_id, entities, boxes)| {
            // every entity gets one box; extras cycle through entities
            let box_entity: Vec<usize> = (0..entities.len())
                .chain((0..).map(|i| i % entities.len()))
                .take(boxes.len().max(entities.len()))
                .collect();
            let boxes = boxes
                .into_iter()
                .cycle()
                .take(box_entity.len())
                .collect::<Vec<_>>();
            DetectionSample {
                image_id,
                image_size: Some((640, 480)),
                boxes,
                box_entity,
                entities,
            }
        })
}

fn grounding_sample() -> impl Strategy<Value = GroundingSample> {
    (
        "[a-z0-9-]{1,10}",
        prop::collection::vec(word(), 2..7),
        1usize..3,
    )
        .prop_map(|(image_id, words, n_phrases)| {
            let caption = words.join(" ");
            let n_phrases = n_phrases.min(words.len());
            // one single-word phrase per box, on distinct words
            let mut phrases = Vec::new();
            let mut start = 0usize;
            for (i, w) in words.iter().enumerate() {
                let len = w.chars().count();
                if i < n_phrases {
                    phrases.push(Phrase {
                        span: CharSpan::new(start, start + len),
                        box_indices: vec![i],
                    });
                }
                start += len + 1;
            }
            let boxes = (0..n_phrases)
                .map(|i| {
                    BoundingBox::new(i as f64, 0.0, i as f64 + 5.0, 5.0).unwrap()
                })
                .collect();
            GroundingSample {
                image_id,
                caption,
                phrases,
                boxes,
            }
        })
}

fn vocab_entry() -> impl Strategy<Value = VocabEntry> {
    (
        word(),
        word(),
        prop::collection::vec(word(), 0..8),
        prop::collection::vec(word(), 0..3),
        0u32..10_000,
    )
        .prop_map(|(entity, type_name, desc_words, similar, rank)| VocabEntry {
            entity: entity.clone(),
            type_name,
            description: desc_words.join(" "),
            similar_objects: similar
                .into_iter()
                .filter(|s| s.to_lowercase() != entity.to_lowercase())
                .collect(),
            frequency_rank: rank,
        })
}

fn prediction_record() -> impl Strategy<Value = PredictionRecord> {
    (
        "[a-z0-9-]{1,10}",
        prop::collection::vec((bbox(), 0u32..=100), 0..5),
    )
        .prop_map(|(image_id, raw)| PredictionRecord {
            image_id,
            query_id: "q".into(),
            predictions: raw
                .into_iter()
                .map(|(bbox, c)| Prediction {
                    bbox,
                    confidence: c as f64 / 100.0,
                    label: None,
                })
                .collect(),
        })
}

fn roundtrip<T>(record: &T)
where
    T: serde::Serialize + serde::de::DeserializeOwned + Validate + PartialEq + std::fmt::Debug,
{
    let line = to_json_line(record).expect("serializes");
    assert!(line.contains("\"v\":1"), "missing schema version: {line}");
    let parsed: T = from_json_line(&line).expect("parses");
    assert_eq!(&parsed, record);
}

proptest! {
    #[test]
    fn detection_samples_roundtrip(sample in detection_sample()) {
        sample.validate().unwrap();
        roundtrip(&sample);
    }

    #[test]
    fn grounding_samples_roundtrip(sample in grounding_sample()) {
        sample.validate().unwrap();
        roundtrip(&sample);
    }

    #[test]
    fn vocab_entries_roundtrip(entry in vocab_entry()) {
        roundtrip(&entry);
    }

    #[test]
    fn prediction_records_roundtrip(rec in prediction_record()) {
        roundtrip(&rec);
    }

    // Queries produced by the generator satisfy all composed-query
    // invariants and round-trip through the wire format.
    #[test]
    fn generated_queries_are_valid_and_roundtrip(
        sample in detection_sample(),
        seed in 0u64..1000,
    ) {
        let vocab = Vocabulary::new(
            sample
                .entities
                .iter()
                .enumerate()
                .map(|(i, e)| VocabEntry {
                    entity: e.clone(),
                    type_name: "thing".into(),
                    description: format!("shape {i}, color {i}"),
                    similar_objects: vec![],
                    frequency_rank: i as u32,
                })
                .collect(),
        );
        let cfg = GenConfig { seed, ..Default::default() };
        let q = gen_detection_query(&sample, &vocab, &cfg, &Tokenizer::word());
        q.validate().unwrap();
        roundtrip(&q);
    }
}

#[test]
fn inverted_box_is_a_validation_error() {
    let line = r#"{"v":1,"image_id":"i","boxes":[[5,5,2,2]],"box_entity":[0],"entities":["cat"]}"#;
    let err = from_json_line::<DetectionSample>(line).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("x1 < x2") || msg.contains("degenerate"), "{msg}");
}

#[test]
fn span_past_caption_end_is_a_validation_error() {
    let line = r#"{"v":1,"image_id":"i","caption":"dog","phrases":[{"span":[0,5],"box_indices":[0]}],"boxes":[[0,0,5,5]]}"#;
    let err = from_json_line::<GroundingSample>(line).unwrap_err();
    match err {
        ModelError::Validation { field, .. } => assert_eq!(field, "phrases"),
        other => panic!("expected validation error, got {other}"),
    }
}

#[test]
fn unicode_caption_roundtrips_with_valid_spans() {
    // "café au lait" -- spans are char indices, so the multi-byte é does
    // not shift them.
    let sample = GroundingSample {
        image_id: "u".into(),
        caption: "café au lait".into(),
        phrases: vec![Phrase {
            span: CharSpan::new(0, 4),
            box_indices: vec![0],
        }],
        boxes: vec![BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap()],
    };
    sample.validate().unwrap();
    assert_eq!(sample.phrases[0].span.slice(&sample.caption), "café");
    roundtrip(&sample);
}

#[test]
fn empty_retained_boxes_serialize_as_empty_array() {
    let q = ComposedQuery {
        image_id: "i".into(),
        text: "nothing here.".into(),
        sub_queries: vec![],
        retained_boxes: vec![],
        char_alignments: vec![],
        seed: 7,
    };
    let line = to_json_line(&q).unwrap();
    assert!(line.contains("\"retained_boxes\":[]"), "{line}");
    roundtrip(&q);
}

#[test]
fn unknown_schema_version_is_rejected() {
    let line = r#"{"v":2,"caption":"a dog","negatives":[]}"#;
    let err = from_json_line::<NegativeCaptionRecord>(line).unwrap_err();
    assert!(matches!(err, ModelError::UnsupportedVersion { found: 2 }));
}

#[test]
fn malformed_json_reports_line_number_via_reader() {
    use desco::jsonl::JsonlReader;
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, r#"{{"v":1,"caption":"ok","negatives":[]}}"#).unwrap();
    writeln!(f, "{{not json").unwrap();
    drop(f);
    let results: Vec<_> = JsonlReader::<NegativeCaptionRecord>::open(&path)
        .unwrap()
        .collect();
    assert!(results[0].is_ok());
    let err = results[1].as_ref().unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
