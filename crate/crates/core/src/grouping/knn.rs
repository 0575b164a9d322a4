//! Brute-force cosine k-nearest-neighbor classification against a labeled
//! reference set.

use indexmap::IndexMap;

use super::vectors::ReferenceSet;
use super::{GroupLabel, GroupingError};

/// Default number of retrieved neighbors.
pub const DEFAULT_K: usize = 8;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, GroupingError> {
    if a.len() != b.len() {
        return Err(GroupingError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
            context: "cosine similarity".into(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GroupingError::ZeroNorm("cosine similarity operand".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// One retrieved neighbor: its position in the reference set and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// Whether `a` ranks strictly ahead of `b`: higher similarity first, equal
/// similarity resolved by reference order.
fn ranks_before(a: &Neighbor, b: &Neighbor) -> bool {
    a.similarity > b.similarity || (a.similarity == b.similarity && a.index < b.index)
}

/// The `k` most similar reference entries, best first.
pub fn nearest_neighbors(
    query: &[f64],
    reference: &ReferenceSet,
    k: usize,
) -> Result<Vec<Neighbor>, GroupingError> {
    if k == 0 || k > reference.len() {
        return Err(GroupingError::KOutOfRange {
            k,
            reference_size: reference.len(),
        });
    }
    if query.len() != reference.dim() {
        return Err(GroupingError::DimensionMismatch {
            expected: reference.dim(),
            found: query.len(),
            context: "query".into(),
        });
    }
    // bounded insertion keeps the top-k list sorted without ranking everything
    let mut top: Vec<Neighbor> = Vec::with_capacity(k + 1);
    for (index, entry) in reference.entries().iter().enumerate() {
        let candidate = Neighbor {
            index,
            similarity: cosine_similarity(query, &entry.vector)?,
        };
        if top.len() == k && !ranks_before(&candidate, &top[k - 1]) {
            continue;
        }
        let pos = top
            .iter()
            .position(|n| ranks_before(&candidate, n))
            .unwrap_or(top.len());
        top.insert(pos, candidate);
        top.truncate(k);
    }
    Ok(top)
}

/// Majority vote over the top-`k` neighbors. A vote tie goes to the label
/// whose best neighbor ranks highest.
pub fn knn_classify(
    query: &[f64],
    reference: &ReferenceSet,
    k: usize,
) -> Result<GroupLabel, GroupingError> {
    let neighbors = nearest_neighbors(query, reference, k)?;
    let entries = reference.entries();
    // insertion order is rank order of each label's first neighbor
    let mut votes: IndexMap<&GroupLabel, usize> = IndexMap::new();
    for n in &neighbors {
        *votes.entry(&entries[n.index].label).or_default() += 1;
    }
    let mut best: Option<(&GroupLabel, usize)> = None;
    for (label, count) in votes {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    Ok(best.expect("k >= 1").0.clone())
}
