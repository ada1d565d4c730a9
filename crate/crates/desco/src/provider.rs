//! Language-model description provider: prompt rendering, response parsing,
//! backends (HTTP completions endpoint or fixture file), and a persistent
//! append-only response cache.
//!
//! The few-shot description prompt lives in
//! `assets/description_prompt.txt` as a versioned template asset; it is
//! reproduced byte-exactly on every render and pinned by a golden test.
//! One rendered prompt serves both the description and the confusable
//! similar-objects fields, which arrive in a single JSON response.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl;
use crate::model::{ModelError, NegativeCaptionRecord, Validate, VocabEntry};

const DESCRIPTION_PROMPT_TEMPLATE: &str = include_str!("../assets/description_prompt.txt");

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no JSON object found in response: {raw:?}")]
    NoJsonObject { raw: String },
    #[error("response object is missing the \"description\" key: {raw:?}")]
    MissingDescription { raw: String },
    #[error("fixture has no entry for {entities:?}")]
    MissingFixture { entities: Vec<String> },
    #[error("auth token environment variable {0} is not set")]
    MissingAuth(String),
    #[error("backend request failed after {attempts} attempts: {message}")]
    BackendFailed { attempts: u32, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three prompts used by the query generators. The description and
/// confusable prompts share one rendered template: a single response carries
/// both the description and the similar objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Description,
    Confusable,
    NegativeCaption,
}

impl PromptKind {
    /// Tag used in cache keys. Description and confusable responses are the
    /// same cached record.
    pub fn cache_tag(&self) -> &'static str {
        match self {
            PromptKind::Description | PromptKind::Confusable => "des",
            PromptKind::NegativeCaption => "neg",
        }
    }
}

/// Render the few-shot description prompt for an entity, byte-exactly.
pub fn render_description_prompt(entity: &str) -> String {
    DESCRIPTION_PROMPT_TEMPLATE.replace("{entity}", entity)
}

/// Render the prompt for `PromptKind::Description` / `PromptKind::Confusable`
/// (same template) or panic for `NegativeCaption`, which needs a caption.
pub fn render_entity_prompt(kind: PromptKind, entity: &str) -> String {
    match kind {
        PromptKind::Description | PromptKind::Confusable => render_description_prompt(entity),
        PromptKind::NegativeCaption => {
            panic!("negative-caption prompt takes a caption, not an entity")
        }
    }
}

/// Render an instruction prompt asking for `n` minimally-edited negative
/// captions, one per line.
pub fn render_negative_caption_prompt(caption: &str, n: usize) -> String {
    assert!(n >= 1, "n must be >= 1");
    let count = if n == 1 {
        "exactly 1 negative caption".to_string()
    } else {
        format!("exactly {n} negative captions")
    };
    let lines = if n == 1 { "one line" } else { "one per line" };
    format!(
        "Rewrite the caption below into {count} that differ from it by only a few words, \
so that each rewritten caption describes a plausible scene that does NOT match the original. \
Keep the sentence structure as close to the original as possible. \
Output only the rewritten captions, {lines}, with no numbering or commentary.\n\n\
Caption: {caption}"
    )
}

/// Extract the first brace-balanced JSON object from raw model output,
/// tolerating leading/trailing prose.
fn first_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parse a raw model completion into a [`VocabEntry`] for `entity`.
///
/// Lenient: leading/trailing prose is stripped, single-quoted objects are
/// retried with quotes swapped, and both `"similar objects"` and
/// `"similar_objects"` key spellings are accepted. A missing `description`
/// key is an error; self-references in similar objects are dropped.
pub fn parse_description_response(text: &str, entity: &str) -> Result<VocabEntry, ProviderError> {
    let object = first_json_object(text).ok_or_else(|| ProviderError::NoJsonObject {
        raw: text.to_string(),
    })?;
    let value: serde_json::Value = match serde_json::from_str(object) {
        Ok(v) => v,
        Err(_) => {
            let swapped = object.replace('\'', "\"");
            serde_json::from_str(&swapped).map_err(|_| ProviderError::NoJsonObject {
                raw: text.to_string(),
            })?
        }
    };
    let description = value
        .get("description")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ProviderError::MissingDescription {
            raw: text.to_string(),
        })?
        .to_string();
    let type_name = value
        .get("type")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let raw_similar = value
        .get("similar objects")
        .or_else(|| value.get("similar_objects"))
        .and_then(|v| v.as_array())
        .map(|arr| {
            arr.iter()
                .filter_map(|v| v.as_str())
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .unwrap_or_default();
    let entity_lower = entity.to_lowercase();
    let similar_objects = raw_similar
        .into_iter()
        .filter(|s| s.to_lowercase() != entity_lower)
        .collect();
    Ok(VocabEntry {
        entity: entity.to_string(),
        type_name,
        description,
        similar_objects,
        frequency_rank: 0,
    })
}

/// Parse a negative-caption completion: up to `n` non-empty lines with
/// numbering and bullet markers stripped.
pub fn parse_negative_caption_response(text: &str, n: usize) -> Vec<String> {
    text.lines()
        .map(|line| {
            line.trim()
                .trim_start_matches(|c: char| {
                    c.is_ascii_digit() || c == '.' || c == ')' || c == '-'
                })
                .trim()
        })
        .filter(|line| !line.is_empty())
        .take(n)
        .map(str::to_string)
        .collect()
}

/// Retry policy for the HTTP backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 250,
        }
    }
}

/// Where completions come from. The fixture backend never performs
/// network I/O: it serves records from a JSONL file.
#[derive(Debug, Clone)]
pub enum ProviderBackend {
    Http {
        url: String,
        /// Name of the environment variable holding the bearer token;
        /// empty means no auth header. The value is never logged.
        auth_env: String,
        model: String,
        timeout: Duration,
        retry: RetryPolicy,
    },
    Fixture(PathBuf),
}

impl ProviderBackend {
    /// Parse a CLI backend spec: `fixture:<path>` or `http:<url>`.
    pub fn from_spec(spec: &str, model: &str, auth_env: &str) -> Result<Self, ProviderError> {
        if let Some(path) = spec.strip_prefix("fixture:") {
            Ok(ProviderBackend::Fixture(PathBuf::from(path)))
        } else if let Some(url) = spec.strip_prefix("http:") {
            Ok(ProviderBackend::Http {
                url: url.to_string(),
                auth_env: auth_env.to_string(),
                model: model.to_string(),
                timeout: Duration::from_secs(30),
                retry: RetryPolicy::default(),
            })
        } else {
            Err(ProviderError::BackendFailed {
                attempts: 0,
                message: format!("unknown backend spec {spec:?}"),
            })
        }
    }
}

/// One line of the append-only response cache, keyed by prompt kind and
/// entity (descriptions) or caption hash (negatives).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum CacheRecord {
    #[serde(rename = "des")]
    Description { key: String, entry: VocabEntry },
    #[serde(rename = "neg")]
    Negatives {
        key: String,
        caption: String,
        negatives: Vec<String>,
    },
}

impl Validate for CacheRecord {
    fn validate(&self) -> Result<(), ModelError> {
        match self {
            CacheRecord::Description { entry, .. } => entry.validate(),
            CacheRecord::Negatives { .. } => Ok(()),
        }
    }
}

pub fn caption_cache_key(caption: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(caption.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Persistent cache: loaded fully at open, appended one line per new
/// response. Appends are serialized; reads are lock-free after load.
struct ResponseCache {
    descriptions: HashMap<String, VocabEntry>,
    negatives: HashMap<String, Vec<String>>,
    appender: Option<Mutex<std::fs::File>>,
}

impl ResponseCache {
    fn open(path: Option<&Path>) -> Result<Self, ProviderError> {
        let mut descriptions = HashMap::new();
        let mut negatives = HashMap::new();
        let appender = match path {
            Some(path) => {
                if path.exists() {
                    for rec in jsonl::JsonlReader::<CacheRecord>::open(path)? {
                        match rec {
                            Ok((_, CacheRecord::Description { key, entry })) => {
                                descriptions.insert(key, entry);
                            }
                            Ok((_, CacheRecord::Negatives { key, negatives: n, .. })) => {
                                negatives.insert(key, n);
                            }
                            Err(e) => {
                                log::warn!("skipping bad cache line: {e}");
                            }
                        }
                    }
                }
                let file = OpenOptions::new().create(true).append(true).open(path)?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(ResponseCache {
            descriptions,
            negatives,
            appender,
        })
    }

    fn append(&self, record: &CacheRecord) -> Result<(), ProviderError> {
        if let Some(appender) = &self.appender {
            let line = jsonl::to_json_line(record)?;
            let mut file = appender.lock().expect("cache lock poisoned");
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        Ok(())
    }
}

/// Pre-loaded fixture contents: description entries and negative captions.
#[derive(Default)]
struct FixtureData {
    descriptions: HashMap<String, VocabEntry>,
    negatives: HashMap<String, Vec<String>>,
}

fn load_fixture(path: &Path) -> Result<FixtureData, ProviderError> {
    let mut data = FixtureData::default();
    let text = std::fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(entry) = jsonl::from_json_line::<VocabEntry>(line) {
            data.descriptions.insert(entry.entity.clone(), entry);
        } else if let Ok(rec) = jsonl::from_json_line::<NegativeCaptionRecord>(line) {
            data.negatives.insert(rec.caption.clone(), rec.negatives);
        } else {
            return Err(ModelError::validation(
                "fixture",
                "line is neither a vocab entry nor a negative-caption record",
            )
            .at_line(i + 1)
            .into());
        }
    }
    Ok(data)
}

/// Successes plus per-item failures from a provider batch.
pub struct DescriptionBatch {
    pub entries: BTreeMap<String, VocabEntry>,
    pub failures: Vec<(String, ProviderError)>,
}

pub struct NegativeCaptionBatch {
    pub negatives: BTreeMap<String, Vec<String>>,
    pub failures: Vec<(String, ProviderError)>,
}

/// Serves entity descriptions and negative captions, consulting the cache
/// first and dispatching misses to the backend with bounded parallelism.
pub struct Provider {
    backend: ProviderBackend,
    fixture: Option<FixtureData>,
    cache: ResponseCache,
    parallelism: usize,
    backend_calls: AtomicUsize,
}

impl Provider {
    pub fn new(backend: ProviderBackend, cache_path: Option<&Path>) -> Result<Self, ProviderError> {
        let fixture = match &backend {
            ProviderBackend::Fixture(path) => Some(load_fixture(path)?),
            ProviderBackend::Http { .. } => None,
        };
        Ok(Provider {
            backend,
            fixture,
            cache: ResponseCache::open(cache_path)?,
            parallelism: 4,
            backend_calls: AtomicUsize::new(0),
        })
    }

    pub fn with_parallelism(mut self, workers: usize) -> Self {
        self.parallelism = workers.max(1);
        self
    }

    /// Number of backend dispatches performed so far (cache hits excluded).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Fetch descriptions for `entities`: cache first, then backend.
    /// Failures are per-entity and non-fatal.
    pub fn get_descriptions(&self, entities: &[String]) -> DescriptionBatch {
        let mut batch = DescriptionBatch {
            entries: BTreeMap::new(),
            failures: Vec::new(),
        };
        let mut misses = Vec::new();
        for entity in entities {
            if batch.entries.contains_key(entity) {
                continue;
            }
            match self.cache.descriptions.get(entity) {
                Some(entry) => {
                    batch.entries.insert(entity.clone(), entry.clone());
                }
                None => misses.push(entity.clone()),
            }
        }
        misses.dedup();

        for (entity, result) in self.dispatch(misses, |p, entity| p.fetch_description(entity)) {
            match result {
                Ok(entry) => {
                    let _ = self.cache.append(&CacheRecord::Description {
                        key: entity.clone(),
                        entry: entry.clone(),
                    });
                    batch.entries.insert(entity, entry);
                }
                Err(e) => batch.failures.push((entity, e)),
            }
        }
        batch
    }

    /// Fetch `n` hard negative captions per caption.
    pub fn get_negative_captions(&self, captions: &[String], n: usize) -> NegativeCaptionBatch {
        let mut batch = NegativeCaptionBatch {
            negatives: BTreeMap::new(),
            failures: Vec::new(),
        };
        let mut misses = Vec::new();
        for caption in captions {
            if batch.negatives.contains_key(caption) {
                continue;
            }
            match self.cache.negatives.get(&caption_cache_key(caption)) {
                Some(negs) => {
                    batch.negatives.insert(caption.clone(), negs.clone());
                }
                None => misses.push(caption.clone()),
            }
        }
        misses.dedup();

        for (caption, result) in self.dispatch(misses, move |p, c| p.fetch_negatives(c, n)) {
            match result {
                Ok(negs) => {
                    let _ = self.cache.append(&CacheRecord::Negatives {
                        key: caption_cache_key(&caption),
                        caption: caption.clone(),
                        negatives: negs.clone(),
                    });
                    batch.negatives.insert(caption, negs);
                }
                Err(e) => batch.failures.push((caption, e)),
            }
        }
        batch
    }

    /// Run `work` over `items` with at most `parallelism` worker threads.
    /// Results are re-ordered afterwards so the outcome does not depend on
    /// scheduling.
    fn dispatch<T: Send>(
        &self,
        items: Vec<String>,
        work: impl Fn(&Self, &str) -> Result<T, ProviderError> + Sync,
    ) -> Vec<(String, Result<T, ProviderError>)> {
        type Slot<T> = (usize, String, Result<T, ProviderError>);
        if items.is_empty() {
            return Vec::new();
        }
        let queue: Mutex<VecDeque<(usize, String)>> =
            Mutex::new(items.into_iter().enumerate().collect());
        let results: Mutex<Vec<Slot<T>>> = Mutex::new(Vec::new());
        let workers = self.parallelism.min(queue.lock().unwrap().len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap().pop_front();
                    let Some((idx, item)) = next else { break };
                    let result = work(self, &item);
                    results.lock().unwrap().push((idx, item, result));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(idx, _, _)| *idx);
        results.into_iter().map(|(_, k, r)| (k, r)).collect()
    }

    fn fetch_description(&self, entity: &str) -> Result<VocabEntry, ProviderError> {
        match &self.backend {
            ProviderBackend::Fixture(_) => {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                let fixture = self.fixture.as_ref().expect("fixture loaded at new()");
                fixture
                    .descriptions
                    .get(entity)
                    .cloned()
                    .ok_or_else(|| ProviderError::MissingFixture {
                        entities: vec![entity.to_string()],
                    })
            }
            ProviderBackend::Http { .. } => {
                let prompt = render_description_prompt(entity);
                let completion = self.http_complete(&prompt)?;
                parse_description_response(&completion, entity)
            }
        }
    }

    fn fetch_negatives(&self, caption: &str, n: usize) -> Result<Vec<String>, ProviderError> {
        match &self.backend {
            ProviderBackend::Fixture(_) => {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                let fixture = self.fixture.as_ref().expect("fixture loaded at new()");
                fixture
                    .negatives
                    .get(caption)
                    .cloned()
                    .ok_or_else(|| ProviderError::MissingFixture {
                        entities: vec![caption.to_string()],
                    })
            }
            ProviderBackend::Http { .. } => {
                let prompt = render_negative_caption_prompt(caption, n);
                let completion = self.http_complete(&prompt)?;
                Ok(parse_negative_caption_response(&completion, n))
            }
        }
    }

    /// POST the prompt to the completions endpoint with retries. Accepts
    /// both `choices[0].text` and `choices[0].message.content` response
    /// shapes.
    fn http_complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let ProviderBackend::Http {
            url,
            auth_env,
            model,
            timeout,
            retry,
        } = &self.backend
        else {
            unreachable!("http_complete called on fixture backend");
        };
        let token = if auth_env.is_empty() {
            None
        } else {
            Some(std::env::var(auth_env).map_err(|_| ProviderError::MissingAuth(auth_env.clone()))?)
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(*timeout)
            .build()
            .map_err(|e| ProviderError::BackendFailed {
                attempts: 0,
                message: e.to_string(),
            })?;
        let body = serde_json::json!({
            "model": model,
            "prompt": prompt,
            "max_tokens": 256,
            "temperature": 0,
        });

        let mut last_error = String::new();
        for attempt in 1..=retry.max_attempts {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let mut request = client.post(url).json(&body);
            if let Some(token) = &token {
                request = request.bearer_auth(token);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let value: serde_json::Value =
                            response.json().map_err(|e| ProviderError::BackendFailed {
                                attempts: attempt,
                                message: format!("bad JSON response: {e}"),
                            })?;
                        let text = value
                            .pointer("/choices/0/text")
                            .or_else(|| value.pointer("/choices/0/message/content"))
                            .and_then(|v| v.as_str());
                        match text {
                            Some(text) => return Ok(text.to_string()),
                            None => {
                                return Err(ProviderError::BackendFailed {
                                    attempts: attempt,
                                    message: "response has no completion text".to_string(),
                                })
                            }
                        }
                    }
                    if status.is_client_error() {
                        return Err(ProviderError::BackendFailed {
                            attempts: attempt,
                            message: format!("HTTP {status}"),
                        });
                    }
                    last_error = format!("HTTP {status}");
                }
                Err(e) => last_error = e.to_string(),
            }
            if attempt < retry.max_attempts {
                std::thread::sleep(Duration::from_millis(retry.backoff_ms * attempt as u64));
            }
        }
        Err(ProviderError::BackendFailed {
            attempts: retry.max_attempts,
            message: last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contains_all_six_examples_and_ends_with_entity() {
        let prompt = render_description_prompt("mallet");
        for example in ["zucchini", "zebra", "apple", "wok", "ambulance", "lantern"] {
            assert!(
                prompt.contains(&format!("Input: **{example}**")),
                "missing {example}"
            );
        }
        assert!(prompt.contains("cylindrical, green, smooth"));
        assert!(prompt.ends_with("Input: **mallet**"));
        let lantern_pos = prompt.find("**lantern**").unwrap();
        let mallet_pos = prompt.find("**mallet**").unwrap();
        assert!(lantern_pos < mallet_pos);
    }

    #[test]
    fn prompt_rendering_is_pure() {
        assert_eq!(
            render_description_prompt("wok"),
            render_description_prompt("wok")
        );
        assert_eq!(
            render_negative_caption_prompt("A dog", 2),
            render_negative_caption_prompt("A dog", 2)
        );
    }

    #[test]
    fn description_and_confusable_share_one_template() {
        assert_eq!(
            render_entity_prompt(PromptKind::Description, "wok"),
            render_entity_prompt(PromptKind::Confusable, "wok")
        );
        assert_eq!(PromptKind::Description.cache_tag(), "des");
        assert_eq!(PromptKind::Confusable.cache_tag(), "des");
    }

    #[test]
    fn negative_prompt_embeds_caption_and_count() {
        let p = render_negative_caption_prompt("A toy bear holding a mallet", 2);
        assert!(p.contains("A toy bear holding a mallet"));
        assert!(p.contains("exactly 2 negative captions"));
        let single = render_negative_caption_prompt("A dog", 1);
        assert!(single.contains("exactly 1 negative caption"));
        assert!(single.contains("one line"));
    }

    #[test]
    fn parses_clean_response() {
        let raw = r#"{"type": "fruit", "description": "red, round, has a stem", "similar objects": ["orange", "banana", "pear"]}"#;
        let entry = parse_description_response(raw, "apple").unwrap();
        assert_eq!(entry.entity, "apple");
        assert_eq!(entry.type_name, "fruit");
        assert_eq!(entry.description, "red, round, has a stem");
        assert_eq!(entry.similar_objects, ["orange", "banana", "pear"]);
    }

    #[test]
    fn parses_response_with_surrounding_prose_and_single_quotes() {
        let raw = "Sure! {'type': 'fruit', 'description': 'red', 'similar objects': ['pear']} hope that helps";
        let entry = parse_description_response(raw, "apple").unwrap();
        assert_eq!(entry.description, "red");
        assert_eq!(entry.similar_objects, ["pear"]);
    }

    #[test]
    fn refuses_response_without_json() {
        let err = parse_description_response("I cannot help", "apple").unwrap_err();
        assert!(matches!(err, ProviderError::NoJsonObject { .. }));
    }

    #[test]
    fn refuses_response_without_description() {
        let err = parse_description_response(r#"{"type": "fruit"}"#, "apple").unwrap_err();
        assert!(matches!(err, ProviderError::MissingDescription { .. }));
    }

    #[test]
    fn drops_self_reference_from_similar_objects() {
        let raw = r#"{"description": "red", "similar objects": ["Apple", "pear"]}"#;
        let entry = parse_description_response(raw, "apple").unwrap();
        assert_eq!(entry.similar_objects, ["pear"]);
    }

    #[test]
    fn strips_numbering_from_negative_lines() {
        let parsed = parse_negative_caption_response("1. A polar bear\n2) A cat\n\n- A dog\n", 3);
        assert_eq!(parsed, ["A polar bear", "A cat", "A dog"]);
    }
}
