//! Partitioning a dataset into labeled groups by task label, by length
//! quantile, or by nearest-neighbor category against a reference set.

pub mod knn;
pub mod vectors;

use std::collections::{HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{record_length, Dataset, LengthBasis};

pub use knn::{cosine_similarity, knn_classify, nearest_neighbors, Neighbor, DEFAULT_K};
pub use vectors::{EmbeddingTable, ReferenceEntry, ReferenceSet};

/// Default number of length bins.
pub const DEFAULT_NUM_BINS: usize = 8;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("records without a task label: {}", .0.join(", "))]
    MissingTask(Vec<String>),
    #[error("number of bins {bins} out of range 1..={records}")]
    BinsOutOfRange { bins: usize, records: usize },
    #[error("k = {k} out of range 1..={reference_size}")]
    KOutOfRange { k: usize, reference_size: usize },
    #[error("dimension mismatch for {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),
    #[error("non-finite vector component: {0}")]
    NonFinite(String),
    #[error("vectors must have at least one dimension")]
    ZeroDimension,
    #[error("no vectors given")]
    EmptyVectors,
    #[error("records without an embedding: {}", .0.join(", "))]
    MissingEmbedding(Vec<String>),
    #[error("group label must not be empty")]
    EmptyLabel,
    #[error("vector file line {line}: {message}")]
    VectorFile { line: usize, message: String },
    #[error("grouped file: {0}")]
    GroupedFile(String),
    #[error("not a partition: {0}")]
    NotPartition(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Name of a group: a task, a length bin like `len[3,7]`, or a reference category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupLabel(String);

impl GroupLabel {
    pub fn new(value: impl Into<String>) -> Result<Self, GroupingError> {
        let value = value.into();
        if value.is_empty() {
            return Err(GroupingError::EmptyLabel);
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for GroupLabel {
    type Error = GroupingError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<GroupLabel> for String {
    fn from(label: GroupLabel) -> Self {
        label.0
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Task,
    Length,
    Embedding,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Task => "task",
            Strategy::Length => "length",
            Strategy::Embedding => "embedding",
        })
    }
}

/// Parameters a grouping was produced with; fields not used by the strategy are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<LengthBasis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_entries: Option<usize>,
}

/// A labeled partition of record ids. Groups are non-empty, pairwise disjoint,
/// and list their ids in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    pub strategy: Strategy,
    pub params: GroupParams,
    pub groups: IndexMap<GroupLabel, Vec<String>>,
    /// Free-form provenance (e.g. the command configuration that produced it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl GroupedDataset {
    /// Checks non-emptiness and disjointness.
    pub fn new(
        strategy: Strategy,
        params: GroupParams,
        groups: IndexMap<GroupLabel, Vec<String>>,
    ) -> Result<Self, GroupingError> {
        let grouped = Self {
            strategy,
            params,
            groups,
            provenance: None,
        };
        grouped.check_disjoint()?;
        Ok(grouped)
    }

    fn check_disjoint(&self) -> Result<(), GroupingError> {
        let mut seen = HashSet::new();
        for (label, ids) in &self.groups {
            if ids.is_empty() {
                return Err(GroupingError::NotPartition(format!(
                    "group `{label}` is empty"
                )));
            }
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(GroupingError::NotPartition(format!(
                        "id `{id}` appears more than once"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_records(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = &GroupLabel> {
        self.groups.keys()
    }

    /// All ids, group by group.
    pub fn all_ids(&self) -> impl Iterator<Item = &str> {
        self.groups.values().flatten().map(String::as_str)
    }

    pub fn label_of(&self) -> HashMap<&str, &GroupLabel> {
        self.groups
            .iter()
            .flat_map(|(label, ids)| ids.iter().map(move |id| (id.as_str(), label)))
            .collect()
    }

    /// Verifies this is an exact partition of `dataset` with ids kept in dataset order.
    pub fn check_partition_of(&self, dataset: &Dataset) -> Result<(), GroupingError> {
        self.check_disjoint()?;
        let position: HashMap<&str, usize> =
            dataset.ids().enumerate().map(|(i, id)| (id, i)).collect();
        for (label, ids) in &self.groups {
            let mut last = None;
            for id in ids {
                let Some(&pos) = position.get(id.as_str()) else {
                    return Err(GroupingError::NotPartition(format!(
                        "id `{id}` in group `{label}` is not in the dataset"
                    )));
                };
                if last.is_some_and(|l| l > pos) {
                    return Err(GroupingError::NotPartition(format!(
                        "group `{label}` is not in dataset order"
                    )));
                }
                last = Some(pos);
            }
        }
        if self.num_records() != dataset.len() {
            return Err(GroupingError::NotPartition(format!(
                "groups cover {} of {} records",
                self.num_records(),
                dataset.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("grouped dataset serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GroupingError> {
        let grouped: Self =
            serde_json::from_str(text).map_err(|e| GroupingError::GroupedFile(e.to_string()))?;
        grouped.check_disjoint()?;
        Ok(grouped)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GroupingError> {
        let text = std::fs::read_to_string(path).map_err(|source| GroupingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub fn group_by_task(dataset: &Dataset) -> Result<GroupedDataset, GroupingError> {
    let missing: Vec<String> = dataset
        .records
        .iter()
        .filter(|r| r.task.as_deref().is_none_or(str::is_empty))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(GroupingError::MissingTask(missing));
    }
    let mut groups: IndexMap<GroupLabel, Vec<String>> = IndexMap::new();
    for record in &dataset.records {
        let label = GroupLabel::new(record.task.clone().expect("checked above"))?;
        groups.entry(label).or_default().push(record.id.clone());
    }
    GroupedDataset::new(Strategy::Task, GroupParams::default(), groups)
}

/// Sizes of `num_bins` contiguous slices of `n` items: the first `n % num_bins`
/// slices get one extra item.
pub fn quantile_bin_sizes(n: usize, num_bins: usize) -> Vec<usize> {
    let (base, extra) = (n / num_bins, n % num_bins);
    (0..num_bins)
        .map(|b| base + usize::from(b < extra))
        .collect()
}

/// Equal-count quantile binning of record lengths. Records are ordered by
/// (length, dataset position) and cut into `num_bins` contiguous slices.
pub fn group_by_length(
    dataset: &Dataset,
    num_bins: usize,
    basis: LengthBasis,
) -> Result<GroupedDataset, GroupingError> {
    let n = dataset.len();
    if num_bins == 0 || num_bins > n {
        return Err(GroupingError::BinsOutOfRange {
            bins: num_bins,
            records: n,
        });
    }
    let lengths: Vec<usize> = dataset
        .records
        .iter()
        .map(|r| record_length(r, basis))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (lengths[i], i));

    let mut bins: Vec<(String, Vec<usize>)> = Vec::with_capacity(num_bins);
    let mut start = 0;
    for size in quantile_bin_sizes(n, num_bins) {
        let mut members = order[start..start + size].to_vec();
        start += size;
        let lo = lengths[members[0]];
        let hi = lengths[*members.last().expect("bins are non-empty")];
        members.sort_unstable();
        bins.push((format!("len[{lo},{hi}]"), members));
    }

    // bins sharing a length range get their index appended
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (label, _) in &bins {
        *counts.entry(label.as_str()).or_default() += 1;
    }
    let collided: HashSet<String> = counts
        .into_iter()
        .filter(|&(_, c)| c > 1)
        .map(|(l, _)| l.to_owned())
        .collect();

    let mut groups = IndexMap::with_capacity(num_bins);
    for (idx, (label, members)) in bins.into_iter().enumerate() {
        let label = if collided.contains(&label) {
            format!("{label}#{idx}")
        } else {
            label
        };
        let ids = members
            .into_iter()
            .map(|i| dataset.records[i].id.clone())
            .collect();
        groups.insert(GroupLabel::new(label)?, ids);
    }
    GroupedDataset::new(
        Strategy::Length,
        GroupParams {
            num_bins: Some(num_bins),
            basis: Some(basis),
            ..GroupParams::default()
        },
        groups,
    )
}

/// Assigns each record the majority category of its `k` nearest reference
/// exemplars. Categories that receive no record are absent.
pub fn group_by_embedding(
    dataset: &Dataset,
    embeddings: &EmbeddingTable,
    reference: &ReferenceSet,
    k: usize,
) -> Result<GroupedDataset, GroupingError> {
    if embeddings.dim() != reference.dim() {
        return Err(GroupingError::DimensionMismatch {
            expected: reference.dim(),
            found: embeddings.dim(),
            context: "embedding table vs reference set".into(),
        });
    }
    if k == 0 || k > reference.len() {
        return Err(GroupingError::KOutOfRange {
            k,
            reference_size: reference.len(),
        });
    }
    let missing: Vec<String> = dataset
        .ids()
        .filter(|id| embeddings.get(id).is_none())
        .map(str::to_owned)
        .collect();
    if !missing.is_empty() {
        return Err(GroupingError::MissingEmbedding(missing));
    }
    let mut groups: IndexMap<GroupLabel, Vec<String>> = IndexMap::new();
    for id in dataset.ids() {
        let vector = embeddings.get(id).expect("checked above");
        let label = knn_classify(vector, reference, k)?;
        groups.entry(label).or_default().push(id.to_owned());
    }
    GroupedDataset::new(
        Strategy::Embedding,
        GroupParams {
            k: Some(k),
            reference_entries: Some(reference.len()),
            ..GroupParams::default()
        },
        groups,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Record;

    fn dataset_with_lengths(lengths: &[usize]) -> Dataset {
        let records = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                Record::new(format!("r{}", i + 1), "i", "", vec!["w"; n].join(" "), None)
            })
            .collect();
        Dataset::from_records(records, "mem").unwrap()
    }

    fn dataset_with_tasks(tasks: &[Option<&str>]) -> Dataset {
        let records = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| Record::new(format!("r{}", i + 1), "i", "", "o", *t))
            .collect();
        Dataset::from_records(records, "mem").unwrap()
    }

    fn ids(grouped: &GroupedDataset) -> Vec<(String, Vec<String>)> {
        grouped
            .groups
            .iter()
            .map(|(l, v)| (l.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn task_groups_by_label() {
        let ds = dataset_with_tasks(&[Some("qa"), Some("qa"), Some("mt")]);
        let grouped = group_by_task(&ds).unwrap();
        assert_eq!(
            ids(&grouped),
            [
                ("qa".to_owned(), vec!["r1".to_owned(), "r2".to_owned()]),
                ("mt".to_owned(), vec!["r3".to_owned()])
            ]
        );
        grouped.check_partition_of(&ds).unwrap();

        let ds = dataset_with_tasks(&[Some("qa"); 4]);
        assert_eq!(group_by_task(&ds).unwrap().num_groups(), 1);
    }

    #[test]
    fn task_requires_labels() {
        let ds = dataset_with_tasks(&[Some("qa"), None, Some("mt")]);
        match group_by_task(&ds) {
            Err(GroupingError::MissingTask(ids)) => assert_eq!(ids, ["r2"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bin_sizes_differ_by_at_most_one() {
        assert_eq!(quantile_bin_sizes(10, 3), [4, 3, 3]);
        assert_eq!(quantile_bin_sizes(6, 3), [2, 2, 2]);
        assert_eq!(quantile_bin_sizes(7, 7), [1; 7]);
    }

    #[test]
    fn length_worked_example() {
        // sorted lengths 1..6 cut into three slices of two
        let ds = dataset_with_lengths(&[4, 1, 6, 2, 5, 3]);
        let grouped = group_by_length(&ds, 3, LengthBasis::TargetTokens).unwrap();
        assert_eq!(
            ids(&grouped),
            [
                (
                    "len[1,2]".to_owned(),
                    vec!["r2".to_owned(), "r4".to_owned()]
                ),
                (
                    "len[3,4]".to_owned(),
                    vec!["r1".to_owned(), "r6".to_owned()]
                ),
                (
                    "len[5,6]".to_owned(),
                    vec!["r3".to_owned(), "r5".to_owned()]
                ),
            ]
        );
    }

    #[test]
    fn length_ties_follow_dataset_order() {
        let ds = dataset_with_lengths(&[5, 5, 5, 5]);
        let grouped = group_by_length(&ds, 2, LengthBasis::TargetTokens).unwrap();
        assert_eq!(
            ids(&grouped),
            [
                (
                    "len[5,5]#0".to_owned(),
                    vec!["r1".to_owned(), "r2".to_owned()]
                ),
                (
                    "len[5,5]#1".to_owned(),
                    vec!["r3".to_owned(), "r4".to_owned()]
                ),
            ]
        );
    }

    #[test]
    fn single_bin_is_whole_dataset() {
        let ds = dataset_with_lengths(&[3, 1, 2]);
        let grouped = group_by_length(&ds, 1, LengthBasis::TargetTokens).unwrap();
        assert_eq!(
            ids(&grouped),
            [(
                "len[1,3]".to_owned(),
                vec!["r1".into(), "r2".into(), "r3".into()]
            )]
        );
    }

    #[test]
    fn bins_out_of_range() {
        let ds = dataset_with_lengths(&[1, 2]);
        assert!(matches!(
            group_by_length(&ds, 0, LengthBasis::TargetTokens),
            Err(GroupingError::BinsOutOfRange { .. })
        ));
        assert!(matches!(
            group_by_length(&ds, 3, LengthBasis::TargetTokens),
            Err(GroupingError::BinsOutOfRange { .. })
        ));
    }

    fn reference(entries: &[(&str, Vec<f64>)]) -> ReferenceSet {
        ReferenceSet::new(
            entries
                .iter()
                .map(|(l, v)| ReferenceEntry {
                    label: GroupLabel::new(*l).unwrap(),
                    vector: v.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> EmbeddingTable {
        EmbeddingTable::new(
            entries
                .iter()
                .map(|(i, v)| (i.to_string(), v.clone()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn embedding_exact_matches() {
        let ds = dataset_with_tasks(&[None, None]);
        let reference = reference(&[("math", vec![1.0, 0.0]), ("law", vec![0.0, 1.0])]);
        let embeddings = table(&[("r1", vec![0.0, 1.0]), ("r2", vec![1.0, 0.0])]);
        let grouped = group_by_embedding(&ds, &embeddings, &reference, 1).unwrap();
        assert_eq!(
            ids(&grouped),
            [
                ("law".to_owned(), vec!["r1".to_owned()]),
                ("math".to_owned(), vec!["r2".to_owned()])
            ]
        );
    }

    #[test]
    fn embedding_uniform_assignment_drops_empty_categories() {
        let labels: Vec<String> = (0..57).map(|i| format!("cat{i}")).collect();
        let mut entries: Vec<(&str, Vec<f64>)> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            let angle = 0.5 + i as f64 * 0.02;
            entries.push((l.as_str(), vec![angle.cos(), angle.sin()]));
        }
        entries.push(("anatomy", vec![1.0, 0.0]));
        entries.push(("anatomy", vec![1.0, 0.01]));
        entries.push(("anatomy", vec![1.0, -0.01]));
        let reference = reference(&entries);
        let ds = dataset_with_tasks(&[None; 5]);
        let embeddings = table(
            &(1..=5)
                .map(|i| {
                    (
                        ["r1", "r2", "r3", "r4", "r5"][i - 1],
                        vec![1.0, 0.001 * i as f64],
                    )
                })
                .collect::<Vec<_>>(),
        );
        let grouped = group_by_embedding(&ds, &embeddings, &reference, 3).unwrap();
        assert_eq!(grouped.num_groups(), 1);
        assert_eq!(grouped.groups[0].len(), 5);
        assert_eq!(grouped.groups.keys().next().unwrap().as_str(), "anatomy");
    }

    #[test]
    fn embedding_errors() {
        let ds = dataset_with_tasks(&[None, None]);
        let reference = reference(&[("a", vec![1.0, 0.0])]);
        let embeddings = table(&[("r1", vec![1.0, 0.0])]);
        assert!(matches!(
            group_by_embedding(&ds, &embeddings, &reference, 1),
            Err(GroupingError::MissingEmbedding(ids)) if ids == ["r2"]
        ));
        let embeddings = table(&[("r1", vec![1.0, 0.0, 0.0]), ("r2", vec![1.0, 0.0, 0.0])]);
        assert!(matches!(
            group_by_embedding(&ds, &embeddings, &reference, 1),
            Err(GroupingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn grouped_json_round_trip() {
        let ds = dataset_with_lengths(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let grouped = group_by_length(&ds, 3, LengthBasis::TargetTokens).unwrap();
        let text = grouped.to_json();
        let again = GroupedDataset::from_json(&text).unwrap();
        assert_eq!(again, grouped);
        assert_eq!(again.to_json(), text);
    }

    #[test]
    fn rejects_overlapping_groups() {
        let text = r#"{"strategy":"task","params":{},"groups":{"a":["r1"],"b":["r1"]}}"#;
        assert!(matches!(
            GroupedDataset::from_json(text),
            Err(GroupingError::NotPartition(_))
        ));
        let text = r#"{"strategy":"task","params":{},"groups":{"a":[]}}"#;
        assert!(GroupedDataset::from_json(text).is_err());
    }
}
