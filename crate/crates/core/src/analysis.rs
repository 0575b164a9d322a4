//! Dataset-level analyses: per-group statistics, the distinct-category count
//! of random samples, and the mean pairwise distance of a vector set.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::{cosine_similarity, GroupLabel, GroupedDataset, GroupingError, Strategy};
use crate::ingest::{record_length, Dataset, LengthBasis};
use crate::scheduler::epoch_rng;

pub const DEFAULT_SAMPLE_SIZE: usize = 500;
pub const DEFAULT_RUNS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error("sample size {sample_size} exceeds population {population}")]
    SampleTooLarge {
        sample_size: usize,
        population: usize,
    },
    #[error("sample size and runs must be positive")]
    ZeroSample,
    #[error("no label for id `{0}`")]
    MissingLabel(String),
    #[error("need at least two vectors, got {0}")]
    TooFewVectors(usize),
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub label: GroupLabel,
    pub count: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub mean_length: f64,
    /// `(length, count)` pairs in increasing length.
    pub histogram: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub strategy: Strategy,
    pub basis: LengthBasis,
    pub total: usize,
    pub groups: Vec<GroupStats>,
    pub histogram: Vec<(usize, usize)>,
}

impl StatsReport {
    /// `label,count,min_length,max_length,mean_length` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,count,min_length,max_length,mean_length\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{:.4}\n",
                csv_field(g.label.as_str()),
                g.count,
                g.min_length,
                g.max_length,
                g.mean_length
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn histogram(lengths: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut counts = BTreeMap::new();
    for len in lengths {
        *counts.entry(len).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

pub fn group_stats(
    grouped: &GroupedDataset,
    dataset: &Dataset,
    basis: LengthBasis,
) -> Result<StatsReport, AnalysisError> {
    grouped.check_partition_of(dataset)?;
    let lengths: HashMap<&str, usize> = dataset
        .records
        .iter()
        .map(|r| (r.id.as_str(), record_length(r, basis)))
        .collect();
    let groups = grouped
        .groups
        .iter()
        .map(|(label, ids)| {
            let lens: Vec<usize> = ids.iter().map(|id| lengths[id.as_str()]).collect();
            GroupStats {
                label: label.clone(),
                count: ids.len(),
                min_length: lens.iter().copied().min().unwrap_or(0),
                max_length: lens.iter().copied().max().unwrap_or(0),
                mean_length: lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64,
                histogram: histogram(lens),
            }
        })
        .collect();
    Ok(StatsReport {
        strategy: grouped.strategy,
        basis,
        total: dataset.len(),
        groups,
        histogram: histogram(lengths.into_values()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCountResult {
    pub sample_size: usize,
    pub runs: usize,
    pub seed: u64,
    /// Distinct labels in each run's sample.
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Draws `sample_size` distinct indices out of `population` (partial Fisher-Yates).
pub fn sample_without_replacement<R: Rng + ?Sized>(
    population: usize,
    sample_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..population).collect();
    for i in 0..sample_size.min(population) {
        let j = rng.random_range(i..population);
        pool.swap(i, j);
    }
    pool.truncate(sample_size);
    pool
}

/// For each run, samples `sample_size` ids without replacement and counts the
/// distinct labels among them. Run `r` draws from generator stream `r`.
pub fn embedding_category_count<S: AsRef<str>>(
    ids: &[S],
    labels: &HashMap<String, GroupLabel>,
    sample_size: usize,
    runs: usize,
    seed: u64,
) -> Result<CategoryCountResult, AnalysisError> {
    if sample_size == 0 || runs == 0 {
        return Err(AnalysisError::ZeroSample);
    }
    if sample_size > ids.len() {
        return Err(AnalysisError::SampleTooLarge {
            sample_size,
            population: ids.len(),
        });
    }
    let resolved: Vec<&GroupLabel> = ids
        .iter()
        .map(|id| {
            labels
                .get(id.as_ref())
                .ok_or_else(|| AnalysisError::MissingLabel(id.as_ref().to_owned()))
        })
        .collect::<Result<_, _>>()?;
    let counts: Vec<usize> = (0..runs)
        .map(|run| {
            let mut rng = epoch_rng(seed, run as u64);
            sample_without_replacement(ids.len(), sample_size, &mut rng)
                .into_iter()
                .map(|i| resolved[i])
                .collect::<HashSet<_>>()
                .len()
        })
        .collect();
    let mean = counts.iter().sum::<usize>() as f64 / runs as f64;
    Ok(CategoryCountResult {
        sample_size,
        runs,
        seed,
        counts,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCategoryCount {
    pub group: GroupLabel,
    pub result: CategoryCountResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerGroupCategoryCount {
    pub groups: Vec<GroupCategoryCount>,
    /// Average of the per-group means.
    pub mean: f64,
}

/// Derived seed for the `index`-th group so groups sample independently.
fn group_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Samples each group separately and averages the per-group means.
pub fn per_group_category_count(
    grouped: &GroupedDataset,
    labels: &HashMap<String, GroupLabel>,
    sample_size: usize,
    runs: usize,
    seed: u64,
) -> Result<PerGroupCategoryCount, AnalysisError> {
    let groups = grouped
        .groups
        .iter()
        .enumerate()
        .map(|(i, (group, ids))| {
            Ok(GroupCategoryCount {
                group: group.clone(),
                result: embedding_category_count(
                    ids,
                    labels,
                    sample_size,
                    runs,
                    group_seed(seed, i),
                )?,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let mean = groups.iter().map(|g| g.result.mean).sum::<f64>() / groups.len().max(1) as f64;
    Ok(PerGroupCategoryCount { groups, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Samples drawn from the whole pool.
    pub vanilla: CategoryCountResult,
    /// Samples drawn from each group, then averaged.
    pub grouped: PerGroupCategoryCount,
    /// `grouped.mean < vanilla.mean`.
    pub grouped_is_lower: bool,
}

/// Distinct-category counts of whole-pool samples versus per-group samples.
pub fn category_correlation(
    grouped: &GroupedDataset,
    labels: &HashMap<String, GroupLabel>,
    sample_size: usize,
    runs: usize,
    seed: u64,
) -> Result<CorrelationReport, AnalysisError> {
    let pool: Vec<&str> = grouped.all_ids().collect();
    let vanilla = embedding_category_count(&pool, labels, sample_size, runs, seed)?;
    let per_group = per_group_category_count(grouped, labels, sample_size, runs, seed)?;
    Ok(CorrelationReport {
        grouped_is_lower: per_group.mean < vanilla.mean,
        vanilla,
        grouped: per_group,
    })
}

/// id → label map from a grouping.
pub fn labels_from_grouping(grouped: &GroupedDataset) -> HashMap<String, GroupLabel> {
    grouped
        .label_of()
        .into_iter()
        .map(|(id, label)| (id.to_owned(), label.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// `1 - cosine similarity`.
    Cosine,
}

/// Mean distance over all unordered pairs.
pub fn mean_pairwise_distance<V: AsRef<[f64]>>(
    vectors: &[V],
    metric: DistanceMetric,
) -> Result<f64, AnalysisError> {
    if vectors.len() < 2 {
        return Err(AnalysisError::TooFewVectors(vectors.len()));
    }
    let dim = vectors[0].as_ref().len();
    for (index, v) in vectors.iter().enumerate() {
        if v.as_ref().len() != dim {
            return Err(AnalysisError::DimensionMismatch {
                index,
                expected: dim,
                found: v.as_ref().len(),
            });
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let (a, b) = (vectors[i].as_ref(), vectors[j].as_ref());
            total += match metric {
                DistanceMetric::Euclidean => a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
                DistanceMetric::Cosine => 1.0 - cosine_similarity(a, b)?,
            };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
