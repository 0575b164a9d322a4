//! Test-only oracles and fixture generators, kept independent of the library
//! code paths they check.
#![allow(dead_code)]

use std::collections::HashMap;

use commonit::grouping::{EmbeddingTable, GroupLabel, ReferenceEntry, ReferenceSet};
use commonit::ingest::{Dataset, Record};
use commonit::trainer::{ToyExample, ToyModel};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Majority-vote kNN by sorting every reference entry. Similarities are
/// computed in a separate pass with a two-norm formula.
pub fn knn_oracle(query: &[f64], reference: &[(String, Vec<f64>)], k: usize) -> String {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(i, (_, v))| {
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = query.iter().zip(v).map(|(a, b)| a * b).sum();
            ((dot / (qn * vn)).clamp(-1.0, 1.0), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let top = &scored[..k];
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (_, i) in top {
        *counts.entry(reference[*i].0.as_str()).or_default() += 1;
    }
    let best = *counts.values().max().unwrap();
    // first label in rank order among those with the best count
    top.iter()
        .map(|(_, i)| reference[*i].0.as_str())
        .find(|l| counts[l] == best)
        .unwrap()
        .to_owned()
}

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-6) {
            return v;
        }
    }
}

pub fn reference_set(entries: &[(String, Vec<f64>)]) -> ReferenceSet {
    ReferenceSet::new(
        entries
            .iter()
            .map(|(l, v)| ReferenceEntry {
                label: GroupLabel::new(l.clone()).unwrap(),
                vector: v.clone(),
            })
            .collect(),
    )
    .unwrap()
}

/// Random reference of `size` entries over `labels` categories.
pub fn random_reference(
    rng: &mut impl Rng,
    size: usize,
    dim: usize,
    labels: usize,
) -> Vec<(String, Vec<f64>)> {
    (0..size)
        .map(|_| {
            (
                format!("c{}", rng.random_range(0..labels)),
                random_vector(rng, dim),
            )
        })
        .collect()
}

/// Dataset with the given target token counts and optional tasks.
pub fn dataset(lengths: &[usize], tasks: Option<&[String]>) -> Dataset {
    let records = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let target = if n == 0 {
                "-".to_owned()
            } else {
                vec!["tok"; n].join(" ")
            };
            let task = tasks.map(|t| t[i].as_str());
            Record::new(format!("r{i:04}"), "instr", "", target, task)
        })
        .collect();
    Dataset::from_records(records, "fixture").unwrap()
}

/// A random dataset plus matching embeddings and reference set.
pub struct RandomCorpus {
    pub dataset: Dataset,
    pub embeddings: EmbeddingTable,
    pub reference: ReferenceSet,
}

pub fn random_corpus(rng: &mut impl Rng, size: usize) -> RandomCorpus {
    let num_tasks = rng.random_range(1..=6);
    let lengths: Vec<usize> = (0..size).map(|_| rng.random_range(1..40)).collect();
    let tasks: Vec<String> = (0..size)
        .map(|_| format!("task{}", rng.random_range(0..num_tasks)))
        .collect();
    let dataset = dataset(&lengths, Some(&tasks));
    let dim = rng.random_range(2..=8);
    let mut vectors = IndexMap::new();
    for record in &dataset.records {
        vectors.insert(record.id.clone(), random_vector(rng, dim));
    }
    let ref_size = rng.random_range(1..=30);
    let labels = rng.random_range(1..=10);
    let reference = reference_set(&random_reference(rng, ref_size, dim, labels));
    RandomCorpus {
        dataset,
        embeddings: EmbeddingTable::new(vectors).unwrap(),
        reference,
    }
}

/// Direct evaluation of `-log softmax(z)[class]` for one example, summing
/// exponentials in the naive order (no max shift). Only for moderate logits.
pub fn nll_oracle(model: &ToyModel, ex: &ToyExample) -> f64 {
    let mut logits = vec![0.0; model.classes];
    for (c, z) in logits.iter_mut().enumerate() {
        *z = model.bias[c];
        for f in 0..model.dim {
            *z += model.weights[c * model.dim + f] * ex.features[f];
        }
    }
    let denom: f64 = logits.iter().map(|z| z.exp()).sum();
    -(logits[ex.class].exp() / denom).ln()
}

/// Central finite-difference gradient of `loss` with respect to every model parameter.
pub fn finite_difference<F: Fn(&ToyModel) -> f64>(model: &ToyModel, eps: f64, loss: F) -> Vec<f64> {
    let n = model.weights.len() + model.bias.len();
    (0..n)
        .map(|i| {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let (p, m) = if i < model.weights.len() {
                (&mut plus.weights[i], &mut minus.weights[i])
            } else {
                let j = i - model.weights.len();
                (&mut plus.bias[j], &mut minus.bias[j])
            };
            *p += eps;
            *m -= eps;
            (loss(&plus) - loss(&minus)) / (2.0 * eps)
        })
        .collect()
}

pub fn random_model(rng: &mut impl Rng, classes: usize, dim: usize) -> ToyModel {
    let mut model = ToyModel::zeros(classes, dim);
    for w in model.weights.iter_mut().chain(model.bias.iter_mut()) {
        *w = rng.random_range(-1.0..1.0);
    }
    model
}

pub fn random_batch(
    rng: &mut impl Rng,
    size: usize,
    classes: usize,
    dim: usize,
) -> Vec<ToyExample> {
    (0..size)
        .map(|i| ToyExample {
            id: format!("x{i}"),
            features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            class: rng.random_range(0..classes),
            group: GroupLabel::new("g").unwrap(),
        })
        .collect()
}

/// Max relative error with an absolute floor for near-zero components.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Applies a Givens rotation in the (i, j) plane to every vector.
pub fn givens(vectors: &mut [Vec<f64>], i: usize, j: usize, theta: f64) {
    let (s, c) = theta.sin_cos();
    for v in vectors {
        let (a, b) = (v[i], v[j]);
        v[i] = c * a - s * b;
        v[j] = s * a + c * b;
    }
}
