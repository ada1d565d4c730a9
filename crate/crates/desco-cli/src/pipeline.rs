//! Streaming query-generation pipeline: reader, worker pool, ordered
//! collector, and run statistics.
//!
//! Input is processed in fixed-size chunks; within a chunk records are
//! mapped in parallel and written back in input order. Seeds derive from
//! `(global seed, image id)`, so output bytes are identical for any worker
//! count.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use desco::jsonl::{self, JsonlWriter};
use desco::model::{
    ComposedQuery, DetectionSample, GroundingSample, NegativeCaptionRecord, Validate, VocabEntry,
};
use desco::querygen::{
    gen_detection_query, gen_glip_detection_query, gen_glip_grounding_query, gen_grounding_query,
    GenConfig, GenMode, Vocabulary,
};
use desco::tokenize::Tokenizer;
use serde::{Deserialize, Serialize};

const CHUNK_LINES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Auto,
    Detection,
    Grounding,
}

impl InputKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(InputKind::Auto),
            "detection" => Ok(InputKind::Detection),
            "grounding" => Ok(InputKind::Grounding),
            other => bail!("unknown input kind {other:?} (expected auto|detection|grounding)"),
        }
    }
}

/// Counters reported after a generation run. `queries_over_budget` must be
/// zero; a nonzero value indicates a packing bug.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct RunStats {
    pub records_in: u64,
    pub records_out: u64,
    pub records_failed: u64,
    pub queries_over_budget: u64,
    pub full_negative_queries: u64,
    pub full_negative_fraction: f64,
    pub sub_queries_total: u64,
    pub mean_sub_queries_per_query: f64,
    pub boxes_in: u64,
    pub boxes_retained: u64,
    pub boxes_dropped_fraction: f64,
}

impl RunStats {
    fn finalize(&mut self) {
        if self.records_out > 0 {
            self.full_negative_fraction =
                self.full_negative_queries as f64 / self.records_out as f64;
            self.mean_sub_queries_per_query =
                self.sub_queries_total as f64 / self.records_out as f64;
        }
        if self.boxes_in > 0 {
            self.boxes_dropped_fraction =
                1.0 - self.boxes_retained as f64 / self.boxes_in as f64;
        }
    }
}

pub struct GenQueriesArgs {
    pub mode: GenMode,
    pub input: PathBuf,
    pub input_kind: InputKind,
    pub out: PathBuf,
    pub vocab: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub negatives: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub gen: GenConfig,
    pub workers: usize,
    pub tokenizer: Tokenizer,
    pub max_failure_rate: f64,
}

/// Merge description entries over vocabulary stubs: described entries win,
/// stubs contribute the remaining names (and their ranks).
pub fn load_vocabulary(
    vocab: Option<&Path>,
    descriptions: Option<&Path>,
) -> Result<Vocabulary> {
    let mut entries: Vec<VocabEntry> = Vec::new();
    if let Some(path) = descriptions {
        entries.extend(
            jsonl::read_all::<VocabEntry>(path)
                .with_context(|| format!("loading descriptions {}", path.display()))?,
        );
    }
    if let Some(path) = vocab {
        let stubs = jsonl::read_all::<VocabEntry>(path)
            .with_context(|| format!("loading vocab {}", path.display()))?;
        // carry stub ranks onto described entries, then append unseen stubs
        let mut rank_of: HashMap<String, u32> = HashMap::new();
        for stub in &stubs {
            rank_of.insert(stub.entity.to_lowercase(), stub.frequency_rank);
        }
        for entry in &mut entries {
            if let Some(&rank) = rank_of.get(&entry.entity.to_lowercase()) {
                entry.frequency_rank = rank;
            }
        }
        entries.extend(stubs);
    }
    Ok(Vocabulary::new(entries))
}

pub fn load_negatives(path: Option<&Path>) -> Result<HashMap<String, Vec<String>>> {
    let Some(path) = path else {
        return Ok(HashMap::new());
    };
    let mut map = HashMap::new();
    for record in jsonl::read_all::<NegativeCaptionRecord>(path)
        .with_context(|| format!("loading negatives {}", path.display()))?
    {
        map.insert(record.caption, record.negatives);
    }
    Ok(map)
}

pub fn load_caption_corpus(path: Option<&Path>) -> Result<Vec<String>> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let mut captions = Vec::new();
    for record in jsonl::read_all::<desco::model::CaptionRecord>(path)
        .with_context(|| format!("loading captions {}", path.display()))?
    {
        captions.push(record.caption);
    }
    Ok(captions)
}

enum ParsedRecord {
    Detection(DetectionSample),
    Grounding(GroundingSample),
}

fn classify_and_parse(line: &str, kind: InputKind) -> Result<ParsedRecord, String> {
    let try_detection = |line: &str| {
        jsonl::from_json_line::<DetectionSample>(line)
            .map(ParsedRecord::Detection)
            .map_err(|e| e.to_string())
    };
    let try_grounding = |line: &str| {
        jsonl::from_json_line::<GroundingSample>(line)
            .map(ParsedRecord::Grounding)
            .map_err(|e| e.to_string())
    };
    match kind {
        InputKind::Detection => try_detection(line),
        InputKind::Grounding => try_grounding(line),
        InputKind::Auto => {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| e.to_string())?;
            if value.get("entities").is_some() {
                try_detection(line)
            } else if value.get("caption").is_some() {
                try_grounding(line)
            } else {
                Err("record has neither \"entities\" nor \"caption\"".to_string())
            }
        }
    }
}

struct GenContext {
    mode: GenMode,
    gen: GenConfig,
    tokenizer: Tokenizer,
    vocab: Vocabulary,
    negatives: HashMap<String, Vec<String>>,
    captions: Vec<String>,
}

fn generate(ctx: &GenContext, record: &ParsedRecord) -> ComposedQuery {
    match (ctx.mode, record) {
        (GenMode::Desco, ParsedRecord::Detection(s)) => {
            gen_detection_query(s, &ctx.vocab, &ctx.gen, &ctx.tokenizer)
        }
        (GenMode::Desco, ParsedRecord::Grounding(s)) => {
            gen_grounding_query(s, &ctx.vocab, &ctx.negatives, &ctx.gen, &ctx.tokenizer)
        }
        (GenMode::GlipBaseline, ParsedRecord::Detection(s)) => {
            gen_glip_detection_query(s, &ctx.vocab, &ctx.gen, &ctx.tokenizer)
        }
        (GenMode::GlipBaseline, ParsedRecord::Grounding(s)) => {
            gen_glip_grounding_query(s, &ctx.captions, &ctx.gen, &ctx.tokenizer)
        }
    }
}

fn record_boxes(record: &ParsedRecord) -> usize {
    match record {
        ParsedRecord::Detection(s) => s.boxes.len(),
        ParsedRecord::Grounding(s) => s.boxes.len(),
    }
}

/// Run the generation pipeline. Per-record failures are skipped and
/// counted; the run fails if the failure fraction exceeds the configured
/// threshold, or if the input is unreadable.
pub fn run_gen_queries(args: &GenQueriesArgs) -> Result<RunStats> {
    args.gen.validate()?;
    let ctx = GenContext {
        mode: args.mode,
        gen: args.gen.clone(),
        tokenizer: args.tokenizer.clone(),
        vocab: load_vocabulary(args.vocab.as_deref(), args.descriptions.as_deref())?,
        negatives: load_negatives(args.negatives.as_deref())?,
        captions: load_caption_corpus(args.captions.as_deref())?,
    };
    let input = File::open(&args.input)
        .with_context(|| format!("cannot open input {}", args.input.display()))?;
    let mut writer = JsonlWriter::create(&args.out)
        .with_context(|| format!("cannot create output {}", args.out.display()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .context("building worker pool")?;

    let mut stats = RunStats::default();
    let mut reader = BufReader::new(input).lines();
    let mut line_no = 0usize;
    loop {
        let mut chunk: Vec<(usize, String)> = Vec::with_capacity(CHUNK_LINES);
        for line in reader.by_ref().take(CHUNK_LINES) {
            let line = line.context("reading input")?;
            line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            chunk.push((line_no, line));
        }
        if chunk.is_empty() {
            break;
        }
        stats.records_in += chunk.len() as u64;

        use rayon::prelude::*;
        type LineResult = (usize, Result<(ComposedQuery, usize, String), String>);
        let results: Vec<LineResult> = pool
            .install(|| {
                chunk
                    .par_iter()
                    .map(|(no, line)| {
                        let out = classify_and_parse(line, args.input_kind).and_then(|rec| {
                            let query = generate(&ctx, &rec);
                            let line = jsonl::to_json_line(&query).map_err(|e| e.to_string())?;
                            Ok((query, record_boxes(&rec), line))
                        });
                        (*no, out)
                    })
                    .collect()
            });

        for (no, result) in results {
            match result {
                Ok((query, boxes_in, line)) => {
                    stats.records_out += 1;
                    stats.boxes_in += boxes_in as u64;
                    stats.boxes_retained += query.retained_boxes.len() as u64;
                    stats.sub_queries_total += query.sub_queries.len() as u64;
                    if query.is_full_negative() {
                        stats.full_negative_queries += 1;
                    }
                    let tokens = args.tokenizer.count_tokens(&query.text);
                    if tokens > args.gen.max_query_tokens {
                        stats.queries_over_budget += 1;
                        log::warn!(
                            "line {no}: query tokenizes to {tokens} > {}",
                            args.gen.max_query_tokens
                        );
                    }
                    writer.write_raw_line(&line)?;
                }
                Err(message) => {
                    stats.records_failed += 1;
                    log::warn!("line {no}: {message}");
                }
            }
        }
    }
    writer.flush()?;
    stats.finalize();

    if stats.records_in > 0 {
        let failure_rate = stats.records_failed as f64 / stats.records_in as f64;
        if failure_rate > args.max_failure_rate {
            bail!(
                "failure rate {:.3} exceeds threshold {:.3} ({} of {} records)",
                failure_rate,
                args.max_failure_rate,
                stats.records_failed,
                stats.records_in
            );
        }
    }
    Ok(stats)
}

/// Recount output-side statistics directly from a queries file; used by the
/// `stats` subcommand and by tests to cross-check pipeline counters.
pub fn recount_stats(
    queries: &Path,
    tokenizer: &Tokenizer,
    max_tokens: usize,
) -> Result<RunStats> {
    let mut stats = RunStats::default();
    for result in jsonl::JsonlReader::<ComposedQuery>::open(queries)? {
        let (_, query) = result?;
        query.validate()?;
        stats.records_out += 1;
        stats.sub_queries_total += query.sub_queries.len() as u64;
        stats.boxes_retained += query.retained_boxes.len() as u64;
        if query.is_full_negative() {
            stats.full_negative_queries += 1;
        }
        if tokenizer.count_tokens(&query.text) > max_tokens {
            stats.queries_over_budget += 1;
        }
    }
    stats.finalize();
    Ok(stats)
}

/// Write stats as one JSON object to the given stream.
pub fn emit_stats(stats: &RunStats, mut out: impl Write) -> Result<()> {
    let line = serde_json::to_string_pretty(stats)?;
    writeln!(out, "{line}")?;
    Ok(())
}
