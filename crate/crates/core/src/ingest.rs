//! Loading, validating and measuring line-delimited instruction-tuning datasets.
//!
//! Each line of a dataset file is one JSON object with the fields `id`,
//! `instruction`, `input`, `output` and an optional `task`. Any other fields
//! are carried along untouched so that a load/save cycle is lossless.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` must not be empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("dataset {path} contains no records")]
    Empty { path: String },
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    /// The supervision target; stored under `output` on disk.
    #[serde(rename = "output")]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    /// Unknown fields, preserved for round-tripping.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Record {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        input: impl Into<String>,
        target: impl Into<String>,
        task: Option<&str>,
    ) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            input: input.into(),
            target: target.into(),
            task: task.map(str::to_owned),
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub source_path: String,
}

impl Dataset {
    /// Builds a dataset from in-memory records, enforcing the same invariants as
    /// [`load_dataset`]. Line numbers in errors are 1-based record positions.
    pub fn from_records(
        records: Vec<Record>,
        source_path: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let source_path = source_path.into();
        if records.is_empty() {
            return Err(IngestError::Empty { path: source_path });
        }
        let mut seen = std::collections::HashMap::with_capacity(records.len());
        for (idx, record) in records.iter().enumerate() {
            check_record(record, idx + 1)?;
            if let Some(first) = seen.insert(record.id.as_str(), idx + 1) {
                return Err(IngestError::DuplicateId {
                    id: record.id.clone(),
                    line: idx + 1,
                    first_line: first,
                });
            }
        }
        Ok(Self {
            records,
            source_path,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Serializes the dataset back to its line-delimited form.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let mut file = fs::File::create(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        file.write_all(self.to_jsonl().as_bytes())
            .map_err(|source| IngestError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}

fn check_record(record: &Record, line: usize) -> Result<(), IngestError> {
    if record.id.is_empty() {
        return Err(IngestError::EmptyField { line, field: "id" });
    }
    if record.target.is_empty() {
        return Err(IngestError::EmptyField {
            line,
            field: "output",
        });
    }
    Ok(())
}

const REQUIRED_FIELDS: [&str; 3] = ["id", "instruction", "output"];

/// Parses dataset text. Blank lines are skipped; line numbers in errors are
/// 1-based physical line numbers.
pub fn parse_dataset(text: &str, source_path: &str) -> Result<Dataset, IngestError> {
    let mut records = Vec::new();
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| IngestError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let Value::Object(object) = &value else {
            return Err(IngestError::Malformed {
                line,
                message: "expected a JSON object".into(),
            });
        };
        if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !object.contains_key(**f)) {
            return Err(IngestError::MissingField { line, field });
        }
        let record: Record = serde_json::from_value(value).map_err(|e| IngestError::Malformed {
            line,
            message: e.to_string(),
        })?;
        check_record(&record, line)?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(IngestError::DuplicateId {
                id: record.id,
                line,
                first_line,
            });
        }
        seen.insert(record.id.clone(), line);
        records.push(record);
    }
    if records.is_empty() {
        return Err(IngestError::Empty {
            path: source_path.to_owned(),
        });
    }
    Ok(Dataset {
        records,
        source_path: source_path.to_owned(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, &path.display().to_string())
}

/// Which text of a record is measured, and in what unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthBasis {
    #[default]
    TargetTokens,
    SourceTokens,
    FullTokens,
    TargetChars,
}

impl LengthBasis {
    pub const ALL: [LengthBasis; 4] = [
        LengthBasis::TargetTokens,
        LengthBasis::SourceTokens,
        LengthBasis::FullTokens,
        LengthBasis::TargetChars,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LengthBasis::TargetTokens => "target-tokens",
            LengthBasis::SourceTokens => "source-tokens",
            LengthBasis::FullTokens => "full-tokens",
            LengthBasis::TargetChars => "target-chars",
        }
    }
}

impl fmt::Display for LengthBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthBasis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LengthBasis::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown length basis `{s}` (expected one of target-tokens, source-tokens, full-tokens, target-chars)"
                )
            })
    }
}

fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Length of a record under `basis`. Tokens are whitespace-delimited; the
/// source is instruction and input, the full text additionally the target.
pub fn record_length(record: &Record, basis: LengthBasis) -> usize {
    match basis {
        LengthBasis::TargetTokens => whitespace_tokens(&record.target),
        LengthBasis::SourceTokens => {
            whitespace_tokens(&record.instruction) + whitespace_tokens(&record.input)
        }
        LengthBasis::FullTokens => {
            whitespace_tokens(&record.instruction)
                + whitespace_tokens(&record.input)
                + whitespace_tokens(&record.target)
        }
        LengthBasis::TargetChars => record.target.chars().count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub record_count: usize,
    pub labeled_count: usize,
    pub task_coverage: f64,
    /// Distinct task labels in sorted order.
    pub tasks: Vec<String>,
    pub empty_input_count: usize,
    pub basis: LengthBasis,
    pub length: Option<LengthSummary>,
}

pub fn validate_dataset(dataset: &Dataset, basis: LengthBasis) -> ValidationReport {
    let record_count = dataset.records.len();
    let tasks: BTreeSet<&str> = dataset
        .records
        .iter()
        .filter_map(|r| r.task.as_deref())
        .collect();
    let labeled_count = dataset.records.iter().filter(|r| r.task.is_some()).count();
    let lengths: Vec<usize> = dataset
        .records
        .iter()
        .map(|r| record_length(r, basis))
        .collect();
    let length = match (lengths.iter().min(), lengths.iter().max()) {
        (Some(&min), Some(&max)) => Some(LengthSummary {
            min,
            max,
            mean: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
        }),
        _ => None,
    };
    ValidationReport {
        record_count,
        labeled_count,
        task_coverage: if record_count == 0 {
            0.0
        } else {
            labeled_count as f64 / record_count as f64
        },
        tasks: tasks.into_iter().map(str::to_owned).collect(),
        empty_input_count: dataset
            .records
            .iter()
            .filter(|r| r.input.is_empty())
            .count(),
        basis,
        length,
    }
}

/// Ids present in `ids` but not in the dataset, in input order.
pub fn unknown_ids<'a>(dataset: &Dataset, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let known: HashSet<&str> = dataset.ids().collect();
    ids.into_iter()
        .filter(|id| !known.contains(id))
        .map(str::to_owned)
        .collect()
}
