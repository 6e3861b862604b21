//! JSONL ingestion of timestamped, labeled posts.

use crate::error::{DtamError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
}

#[derive(Clone, Debug)]
pub struct IngestFilters {
    /// Posts with fewer whitespace-separated words are dropped.
    pub min_words: usize,
    /// Author names of automated accounts.
    pub automated_authors: Vec<String>,
}

impl Default for IngestFilters {
    fn default() -> Self {
        Self {
            min_words: 20,
            automated_authors: vec!["AutoModerator".to_string()],
        }
    }
}

impl IngestFilters {
    pub fn keeps(&self, doc: &RawDocument) -> bool {
        if let Some(author) = &doc.author {
            if self.automated_authors.iter().any(|a| a == author) {
                return false;
            }
        }
        doc.text.split_whitespace().count() >= self.min_words
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<RawDocument> {
    let err = |message: String| DtamError::Parse { line: lineno, message };
    let value: Value = serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record is not a JSON object".into()))?;
    let field = |key: &str| obj.get(key).ok_or_else(|| err(format!("missing key \"{key}\"")));
    let id = match field("id")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err(err("\"id\" must be a string or number".into())),
    };
    let text = field("text")?
        .as_str()
        .ok_or_else(|| err("\"text\" must be a string".into()))?
        .to_string();
    let ts = field("timestamp")?
        .as_f64()
        .ok_or_else(|| err("\"timestamp\" must be a number".into()))?;
    let label = field("label")?
        .as_f64()
        .ok_or_else(|| err("\"label\" must be a number".into()))?;
    let author = match obj.get("author") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(err("\"author\" must be a string".into())),
    };
    if text.trim().is_empty() {
        return Err(err("empty text".into()));
    }
    if !(ts > 0.0) {
        return Err(err(format!("timestamp must be positive, got {ts}")));
    }
    if !label.is_finite() {
        return Err(err("label is not finite".into()));
    }
    Ok(RawDocument {
        id,
        text,
        timestamp: ts.floor() as i64,
        label,
        author,
    })
}

/// Reads records in order, dropping those that fail `filters` or are not valid UTF-8.
pub fn read_jsonl<R: Read>(reader: R, filters: &IngestFilters) -> Result<Vec<RawDocument>> {
    let mut out = Vec::new();
    let mut reader = BufReader::new(reader);
    let mut buf = Vec::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        lineno += 1;
        let Ok(line) = std::str::from_utf8(&buf) else {
            continue;
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let doc = parse_record(line, lineno)?;
        if filters.keeps(&doc) {
            out.push(doc);
        }
    }
    Ok(out)
}

pub fn ingest_jsonl(path: &Path, filters: &IngestFilters) -> Result<Vec<RawDocument>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(file, filters)
}

pub fn write_jsonl<W: Write>(mut w: W, docs: &[RawDocument]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d).map_err(|e| DtamError::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
