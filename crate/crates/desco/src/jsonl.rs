//! JSONL wire format: one record per line, every line carrying a schema
//! version field `"v": 1`.
//!
//! [`from_json_line`]/[`to_json_line`] are the single (de)serialization
//! path for all record kinds; parsing always validates record invariants.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::model::{ModelError, Validate};

pub const SCHEMA_VERSION: u64 = 1;

/// Parse one JSONL line into a validated record.
///
/// A missing `"v"` field is accepted for lenient ingest; any version other
/// than 1 is rejected.
pub fn from_json_line<T>(line: &str) -> Result<T, ModelError>
where
    T: DeserializeOwned + Validate,
{
    let value: Value = serde_json::from_str(line).map_err(|source| ModelError::Parse {
        line: None,
        source,
    })?;
    if let Some(v) = value.get("v") {
        let found = v.as_u64().unwrap_or(0);
        if found != SCHEMA_VERSION {
            return Err(ModelError::UnsupportedVersion { found });
        }
    }
    let record: T = serde_json::from_value(value).map_err(|source| ModelError::Parse {
        line: None,
        source,
    })?;
    record.validate()?;
    Ok(record)
}

/// Serialize a validated record to a single JSON line (no trailing newline).
pub fn to_json_line<T>(record: &T) -> Result<String, ModelError>
where
    T: Serialize + Validate,
{
    record.validate()?;
    let mut value = serde_json::to_value(record).map_err(|source| ModelError::Parse {
        line: None,
        source,
    })?;
    match value.as_object_mut() {
        Some(map) => {
            map.insert("v".to_string(), Value::from(SCHEMA_VERSION));
        }
        None => {
            return Err(ModelError::validation(
                "record",
                "record did not serialize to a JSON object",
            ))
        }
    }
    serde_json::to_string(&value).map_err(|source| ModelError::Parse { line: None, source })
}

/// Streaming reader over a JSONL file, yielding `(line_number, record)` with
/// 1-based line numbers attached to errors. Blank lines are skipped.
pub struct JsonlReader<T> {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T> JsonlReader<T>
where
    T: DeserializeOwned + Validate,
{
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let file = File::open(path.as_ref())?;
        Ok(JsonlReader {
            lines: BufReader::new(file).lines(),
            line_no: 0,
            _marker: PhantomData,
        })
    }
}

impl<T> Iterator for JsonlReader<T>
where
    T: DeserializeOwned + Validate,
{
    type Item = Result<(usize, T), ModelError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                from_json_line(&line)
                    .map(|r| (self.line_no, r))
                    .map_err(|e| e.at_line(self.line_no)),
            );
        }
    }
}

/// Read a whole JSONL file into memory, failing on the first bad record.
pub fn read_all<T>(path: impl AsRef<Path>) -> Result<Vec<T>, ModelError>
where
    T: DeserializeOwned + Validate,
{
    JsonlReader::open(path)?
        .map(|r| r.map(|(_, rec)| rec))
        .collect()
}

/// Buffered JSONL writer.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let file = File::create(path.as_ref())?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
        })
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlWriter { out }
    }

    pub fn write<T>(&mut self, record: &T) -> Result<(), ModelError>
    where
        T: Serialize + Validate,
    {
        let line = to_json_line(record)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    /// Write a pre-serialized line (already carrying its version field).
    pub fn write_raw_line(&mut self, line: &str) -> Result<(), ModelError> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), ModelError> {
        self.out.flush()?;
        Ok(())
    }
}
