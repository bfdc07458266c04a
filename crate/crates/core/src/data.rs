//! Tuning data: an ordered set of examples with named text fields.
//!
//! On disk, one JSON object per line whose values are strings. An `id` key,
//! if present, names the example; otherwise the 1-based line number does.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("tuning data is empty")]
    Empty,
    #[error("example {id} has fields {found:?}, expected {expected:?}")]
    InconsistentFields {
        id: String,
        found: BTreeSet<String>,
        expected: BTreeSet<String>,
    },
    #[error("duplicate example id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Example {
    pub id: String,
    pub fields: BTreeMap<String, String>,
}

impl Example {
    pub fn new(id: impl Into<String>, fields: &[(&str, &str)]) -> Self {
        Self {
            id: id.into(),
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuningSet {
    examples: Vec<Example>,
    fields: BTreeSet<String>,
}

impl TuningSet {
    pub fn new(examples: Vec<Example>) -> Result<Self, DataError> {
        let first = examples.first().ok_or(DataError::Empty)?;
        let fields: BTreeSet<String> = first.fields.keys().cloned().collect();
        let mut ids = BTreeSet::new();
        for ex in &examples {
            let found: BTreeSet<String> = ex.fields.keys().cloned().collect();
            if found != fields {
                return Err(DataError::InconsistentFields {
                    id: ex.id.clone(),
                    found,
                    expected: fields,
                });
            }
            if !ids.insert(ex.id.as_str()) {
                return Err(DataError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self { examples, fields })
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, DataError> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| DataError::Parse {
                line: line_no,
                message,
            };
            let Json::Object(map) =
                serde_json::from_str::<Json>(line).map_err(|e| parse_err(e.to_string()))?
            else {
                return Err(parse_err("expected a JSON object".into()));
            };
            let mut id = line_no.to_string();
            let mut fields = BTreeMap::new();
            for (key, value) in map {
                match (key.as_str(), value) {
                    ("id", Json::String(s)) => id = s,
                    ("id", Json::Number(n)) => id = n.to_string(),
                    (_, Json::String(s)) => {
                        fields.insert(key, s);
                    }
                    (_, other) => {
                        return Err(parse_err(format!(
                            "field `{key}` must be a string, got {other}"
                        )))
                    }
                }
            }
            examples.push(Example { id, fields });
        }
        Self::new(examples)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, index: usize) -> &Example {
        &self.examples[index]
    }

    pub fn fields(&self) -> &BTreeSet<String> {
        &self.fields
    }
}
