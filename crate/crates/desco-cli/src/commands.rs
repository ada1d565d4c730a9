//! Subcommand implementations shared by the binary and the integration
//! tests. Each returns data so tests can assert on it directly.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use desco::eval::{
    build_context_pairs, context_dependence_audit, corpus_average_precision_with,
    evaluate_sensitivity, ApInterpolation, AuditReport, ContextPair, SensitivityReport,
};
use desco::jsonl::{self, JsonlWriter};
use desco::model::{
    BoundingBox, CaptionRecord, ComposedQuery, DetectionSample, NegativeCaptionRecord,
    Prediction, PredictionRecord, Validate, VocabEntry,
};
use desco::provider::{Provider, ProviderBackend};
use desco::tokenize::{build_alignment_matrix, Tokenizer};
use desco::vocab::{PhraseCounter, VocabBuildConfig};
use serde::Serialize;

/// `build-vocab`: count noun phrases over a caption corpus and write the
/// ranked stub entries.
pub fn build_vocab(
    input: &Path,
    out: &Path,
    cfg: &VocabBuildConfig,
) -> Result<Vec<VocabEntry>> {
    let mut counter = PhraseCounter::new();
    for record in jsonl::JsonlReader::<CaptionRecord>::open(input)
        .with_context(|| format!("cannot open captions {}", input.display()))?
    {
        let (_, record) = record?;
        counter.add_caption(&record.caption, cfg);
    }
    let vocab = counter.into_vocabulary(cfg)?;
    let mut writer = JsonlWriter::create(out)?;
    for entry in &vocab {
        writer.write(entry)?;
    }
    writer.flush()?;
    Ok(vocab)
}

/// `describe`: fetch descriptions for every vocab entity, merge the stub
/// ranks onto the fetched entries, and write them ordered by rank.
pub fn describe(
    vocab_path: &Path,
    backend: ProviderBackend,
    cache: Option<&Path>,
    out: &Path,
    parallelism: usize,
    max_failure_rate: f64,
) -> Result<(usize, usize)> {
    let stubs = jsonl::read_all::<VocabEntry>(vocab_path)?;
    let entities: Vec<String> = stubs.iter().map(|e| e.entity.clone()).collect();
    let provider = Provider::new(backend, cache)?.with_parallelism(parallelism);
    let batch = provider.get_descriptions(&entities);

    let mut entries: Vec<VocabEntry> = Vec::with_capacity(batch.entries.len());
    for stub in &stubs {
        if let Some(found) = batch.entries.get(&stub.entity) {
            let mut entry = found.clone();
            entry.frequency_rank = stub.frequency_rank;
            entries.push(entry);
        }
    }
    let mut writer = JsonlWriter::create(out)?;
    for entry in &entries {
        writer.write(entry)?;
    }
    writer.flush()?;

    for (entity, error) in &batch.failures {
        log::warn!("description failed for {entity:?}: {error}");
    }
    let failed = batch.failures.len();
    if !entities.is_empty() {
        let rate = failed as f64 / entities.len() as f64;
        if rate > max_failure_rate {
            bail!("description failure rate {rate:.3} exceeds {max_failure_rate:.3}");
        }
    }
    Ok((entries.len(), failed))
}

/// `negatives`: fetch hard negative captions for every input caption.
pub fn negatives(
    captions_path: &Path,
    backend: ProviderBackend,
    cache: Option<&Path>,
    n: usize,
    out: &Path,
    parallelism: usize,
    max_failure_rate: f64,
) -> Result<(usize, usize)> {
    let mut captions = Vec::new();
    for record in jsonl::JsonlReader::<CaptionRecord>::open(captions_path)? {
        captions.push(record?.1.caption);
    }
    let provider = Provider::new(backend, cache)?.with_parallelism(parallelism);
    let batch = provider.get_negative_captions(&captions, n);

    let mut writer = JsonlWriter::create(out)?;
    let mut written = 0usize;
    for caption in &captions {
        if let Some(negs) = batch.negatives.get(caption) {
            writer.write(&NegativeCaptionRecord {
                caption: caption.clone(),
                negatives: negs.clone(),
            })?;
            written += 1;
        }
    }
    writer.flush()?;
    for (caption, error) in &batch.failures {
        log::warn!("negative captions failed for {caption:?}: {error}");
    }
    let failed = batch.failures.len();
    if !captions.is_empty() && failed as f64 / captions.len() as f64 > max_failure_rate {
        bail!("negative-caption failure rate exceeds {max_failure_rate:.3}");
    }
    Ok((written, failed))
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizeCheckReport {
    pub queries: u64,
    pub max_tokens_seen: usize,
    pub budget: usize,
    pub over_budget: u64,
    pub alignment_errors: u64,
}

/// `tokenize-check`: verify the token budget and alignment-row soundness of
/// every query in a file.
pub fn tokenize_check(
    queries: &Path,
    tokenizer: &Tokenizer,
    budget: usize,
) -> Result<TokenizeCheckReport> {
    let mut report = TokenizeCheckReport {
        queries: 0,
        max_tokens_seen: 0,
        budget,
        over_budget: 0,
        alignment_errors: 0,
    };
    for result in jsonl::JsonlReader::<ComposedQuery>::open(queries)? {
        let (line_no, query) = result?;
        report.queries += 1;
        let tokens = tokenizer.count_tokens(&query.text);
        report.max_tokens_seen = report.max_tokens_seen.max(tokens);
        if tokens > budget {
            report.over_budget += 1;
            log::warn!("line {line_no}: {tokens} tokens > budget {budget}");
        }
        if let Err(e) = build_alignment_matrix(&query, tokenizer, None) {
            report.alignment_errors += 1;
            log::warn!("line {line_no}: alignment error: {e}");
        }
    }
    Ok(report)
}

/// `audit`: context-dependence report over a query corpus. Optionally
/// writes the per-surface statistics as JSONL.
pub fn audit(
    queries: &Path,
    tokenizer: &Tokenizer,
    per_surface_out: Option<&Path>,
) -> Result<AuditReport> {
    let mut corpus = Vec::new();
    for result in jsonl::JsonlReader::<ComposedQuery>::open(queries)? {
        corpus.push(result?.1);
    }
    let report = context_dependence_audit(corpus.iter(), tokenizer);
    if let Some(path) = per_surface_out {
        #[derive(Serialize)]
        struct Row<'a> {
            surface: &'a str,
            n_pos: u64,
            n_neg: u64,
            conditional_entropy_bits: f64,
        }
        let mut file = std::fs::File::create(path)?;
        for (surface, stats) in &report.per_surface {
            let row = Row {
                surface,
                n_pos: stats.n_pos,
                n_neg: stats.n_neg,
                conditional_entropy_bits: stats.conditional_entropy_bits,
            };
            writeln!(file, "{}", serde_json::to_string(&row)?)?;
        }
    }
    Ok(report)
}

/// `build-pairs`: one context pair per (image, rare entity) occurrence.
/// `rare` is a newline-delimited list of rare entity names.
pub fn build_pairs(
    samples: &Path,
    rare: &Path,
    descriptions: &Path,
    out: &Path,
) -> Result<(usize, usize)> {
    let rare_names: BTreeSet<String> = std::fs::read_to_string(rare)
        .with_context(|| format!("cannot read rare list {}", rare.display()))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect();
    let mut description_map = HashMap::new();
    for entry in jsonl::read_all::<VocabEntry>(descriptions)? {
        description_map.insert(entry.entity.clone(), entry);
    }

    let mut rare_objects: Vec<(String, String, Vec<BoundingBox>)> = Vec::new();
    for result in jsonl::JsonlReader::<DetectionSample>::open(samples)? {
        let (_, sample) = result?;
        for (i, entity) in sample.entities.iter().enumerate() {
            if rare_names.contains(&entity.to_lowercase()) {
                let boxes = sample
                    .boxes_of_entity(i)
                    .into_iter()
                    .map(|b| sample.boxes[b])
                    .collect();
                rare_objects.push((sample.image_id.clone(), entity.clone(), boxes));
            }
        }
    }
    let (pairs, skipped) = build_context_pairs(&rare_objects, &description_map);
    let mut writer = JsonlWriter::create(out)?;
    for pair in &pairs {
        writer.write(pair)?;
    }
    writer.flush()?;
    for (image, reason) in &skipped {
        log::warn!("skipped pair on {image}: {reason}");
    }
    Ok((pairs.len(), skipped.len()))
}

/// Load a predictions file into a `(image_id, query_id)` keyed map,
/// concatenating duplicate keys.
pub fn load_predictions(
    path: &Path,
) -> Result<HashMap<(String, String), Vec<Prediction>>> {
    let mut map: HashMap<(String, String), Vec<Prediction>> = HashMap::new();
    for result in jsonl::JsonlReader::<PredictionRecord>::open(path)? {
        let (_, record) = result?;
        map.entry((record.image_id, record.query_id))
            .or_default()
            .extend(record.predictions);
    }
    Ok(map)
}

/// `eval-sensitivity`: averaged delta-box / delta-conf / AP over pairs.
pub fn eval_sensitivity(
    pairs_path: &Path,
    preds_path: &Path,
    iou_thr: f64,
) -> Result<SensitivityReport> {
    let pairs: Vec<ContextPair> = jsonl::read_all(pairs_path)?;
    let predictions = load_predictions(preds_path)?;
    let report = evaluate_sensitivity(&pairs, &predictions, iou_thr);
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ApRunReport {
    pub ap: f64,
    pub n_images: usize,
    pub n_ground_truth: usize,
    pub n_predictions: usize,
    pub iou_threshold: f64,
}

/// Parse an interpolation spec: `all-point` or `points:<n>` (`coco101`
/// is shorthand for `points:101`).
pub fn parse_interpolation(spec: &str) -> Result<ApInterpolation> {
    match spec {
        "all-point" => Ok(ApInterpolation::AllPoint),
        "coco101" => Ok(ApInterpolation::Points(101)),
        other => {
            if let Some(n) = other.strip_prefix("points:") {
                let n: usize = n.parse().context("interpolation point count")?;
                if n < 2 {
                    bail!("need at least 2 interpolation points");
                }
                Ok(ApInterpolation::Points(n))
            } else {
                bail!("unknown interpolation {other:?} (expected all-point|coco101|points:<n>)")
            }
        }
    }
}

/// `eval-ap`: corpus AP of a predictions file against ground-truth
/// detection samples (all query ids for an image pooled together).
pub fn eval_ap(
    preds_path: &Path,
    gt_path: &Path,
    iou_thr: f64,
    interp: ApInterpolation,
) -> Result<ApRunReport> {
    let mut preds_by_image: HashMap<String, Vec<Prediction>> = HashMap::new();
    for result in jsonl::JsonlReader::<PredictionRecord>::open(preds_path)? {
        let (_, record) = result?;
        preds_by_image
            .entry(record.image_id)
            .or_default()
            .extend(record.predictions);
    }
    let mut gt_by_image: HashMap<String, Vec<BoundingBox>> = HashMap::new();
    for result in jsonl::JsonlReader::<DetectionSample>::open(gt_path)? {
        let (_, sample) = result?;
        gt_by_image
            .entry(sample.image_id)
            .or_default()
            .extend(sample.boxes);
    }
    let ap = corpus_average_precision_with(&preds_by_image, &gt_by_image, iou_thr, interp);
    Ok(ApRunReport {
        ap,
        n_images: gt_by_image.len(),
        n_ground_truth: gt_by_image.values().map(Vec::len).sum(),
        n_predictions: preds_by_image.values().map(Vec::len).sum(),
        iou_threshold: iou_thr,
    })
}
