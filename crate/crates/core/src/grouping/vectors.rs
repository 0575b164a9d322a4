//! Embedding tables and labeled reference sets, plus their line-delimited file
//! formats (`{"id", "vector"}` and `{"label", "vector"}` per line).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{GroupLabel, GroupingError};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(vectors: IndexMap<String, Vec<f64>>) -> Result<Self, GroupingError> {
        let dim = vectors
            .values()
            .next()
            .map(Vec::len)
            .ok_or(GroupingError::EmptyVectors)?;
        if dim == 0 {
            return Err(GroupingError::ZeroDimension);
        }
        for (id, v) in &vectors {
            check_vector(id, v, dim)?;
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            vector: &'a [f64],
        }
        let mut out = String::new();
        for (id, vector) in self.iter() {
            out.push_str(&serde_json::to_string(&Line { id, vector }).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GroupingError> {
        Self::new(parse_id_vectors(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, GroupingError> {
        Self::parse(&read(path)?)
    }
}

/// Reads `{"id", "vector"}` lines without the table's shape checks (zero
/// vectors and ragged dimensions pass through). Ids must be unique.
pub fn parse_id_vectors(text: &str) -> Result<IndexMap<String, Vec<f64>>, GroupingError> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        vector: Vec<f64>,
    }
    let mut vectors = IndexMap::new();
    for (line_no, line) in parse_lines::<Line>(text)? {
        if vectors.contains_key(&line.id) {
            return Err(GroupingError::VectorFile {
                line: line_no,
                message: format!("duplicate id `{}`", line.id),
            });
        }
        vectors.insert(line.id, line.vector);
    }
    Ok(vectors)
}

pub fn load_id_vectors(path: &Path) -> Result<IndexMap<String, Vec<f64>>, GroupingError> {
    parse_id_vectors(&read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub label: GroupLabel,
    pub vector: Vec<f64>,
}

/// Labeled exemplar vectors. Labels may repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    dim: usize,
    entries: Vec<ReferenceEntry>,
}

impl ReferenceSet {
    pub fn new(entries: Vec<ReferenceEntry>) -> Result<Self, GroupingError> {
        let dim = entries
            .first()
            .map(|e| e.vector.len())
            .ok_or(GroupingError::EmptyVectors)?;
        if dim == 0 {
            return Err(GroupingError::ZeroDimension);
        }
        for entry in &entries {
            check_vector(entry.label.as_str(), &entry.vector, dim)?;
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<&GroupLabel> {
        let mut seen = indexmap::IndexSet::new();
        for entry in &self.entries {
            seen.insert(&entry.label);
        }
        seen.into_iter().collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GroupingError> {
        let entries = parse_lines::<ReferenceEntry>(text)?
            .into_iter()
            .map(|(_, e)| e)
            .collect();
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, GroupingError> {
        Self::parse(&read(path)?)
    }
}

fn check_vector(name: &str, v: &[f64], dim: usize) -> Result<(), GroupingError> {
    if v.len() != dim {
        return Err(GroupingError::DimensionMismatch {
            expected: dim,
            found: v.len(),
            context: name.to_owned(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GroupingError::NonFinite(name.to_owned()));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(GroupingError::ZeroNorm(name.to_owned()));
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, GroupingError> {
    fs::read_to_string(path).map_err(|source| GroupingError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>, GroupingError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| GroupingError::VectorFile {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip() {
        let mut map = IndexMap::new();
        map.insert("b".to_owned(), vec![0.25, -1.0, 3.5]);
        map.insert("a".to_owned(), vec![1e-7, 2.0, 0.1]);
        let table = EmbeddingTable::new(map).unwrap();
        let again = EmbeddingTable::parse(&table.to_jsonl()).unwrap();
        assert_eq!(table, again);
        assert_eq!(
            again.iter().map(|(id, _)| id).collect::<Vec<_>>(),
            ["b", "a"]
        );
    }

    #[test]
    fn rejects_bad_vectors() {
        let text = "{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vector\":[1,0,0]}\n";
        assert!(matches!(
            EmbeddingTable::parse(text),
            Err(GroupingError::DimensionMismatch { .. })
        ));
        let text = "{\"id\":\"a\",\"vector\":[0,0]}\n";
        assert!(matches!(
            EmbeddingTable::parse(text),
            Err(GroupingError::ZeroNorm(_))
        ));
        let text = "{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"a\",\"vector\":[0,1]}\n";
        assert!(matches!(
            EmbeddingTable::parse(text),
            Err(GroupingError::VectorFile { line: 2, .. })
        ));
        let text = "{\"label\":\"\",\"vector\":[1,0]}\n";
        assert!(ReferenceSet::parse(text).is_err());
        assert!(matches!(
            ReferenceSet::parse(""),
            Err(GroupingError::EmptyVectors)
        ));
    }

    #[test]
    fn reference_labels_may_repeat() {
        let text = "{\"label\":\"A\",\"vector\":[1,0]}\n{\"label\":\"B\",\"vector\":[0,1]}\n{\"label\":\"A\",\"vector\":[1,1]}\n";
        let reference = ReferenceSet::parse(text).unwrap();
        assert_eq!(reference.len(), 3);
        let labels: Vec<&str> = reference.labels().iter().map(|l| l.as_str()).collect();
        assert_eq!(labels, ["A", "B"]);
    }
}
