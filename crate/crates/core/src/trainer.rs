//! A linear softmax classifier trained by plain SGD over a schedule manifest.
//!
//! Stands in for the language model: the per-batch objective is the mean
//! negative log-likelihood of each example's target class, which is all the
//! batching contract needs.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::{GroupLabel, GroupParams, GroupedDataset, Strategy};
use crate::scheduler::{Schedule, ScheduleMode};
use crate::sha256_hex;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid synthetic data configuration: {0}")]
    InvalidSynthConfig(String),
    #[error("scheduled id `{id}` at step {step} has no example")]
    UnresolvedId { id: String, step: usize },
    #[error("example `{id}` does not fit the model: {message}")]
    Shape { id: String, message: String },
    #[error("cannot compare runs trained on different examples")]
    MismatchedExamples,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExample {
    pub id: String,
    pub features: Vec<f64>,
    pub class: usize,
    /// Generating task.
    pub group: GroupLabel,
}

/// Weights (`classes × dim`, row-major) and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn gaussian(classes: usize, dim: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
        let mut model = Self::zeros(classes, dim);
        for w in model.weights.iter_mut().chain(model.bias.iter_mut()) {
            *w = normal.sample(&mut rng);
        }
        model
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * self.dim + feature]
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, features: &[f64]) -> usize {
        let logits = self.logits(features);
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        best
    }

    /// All parameters, weights first then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ToyModel, scale: f64) {
        for (p, g) in self.params_mut().zip(other.params()) {
            *p += scale * g;
        }
    }

    pub fn norm(&self) -> f64 {
        self.params().map(|p| p * p).sum::<f64>().sqrt()
    }

    fn check_example(&self, example: &ToyExample) -> Result<(), TrainError> {
        if example.features.len() != self.dim {
            return Err(TrainError::Shape {
                id: example.id.clone(),
                message: format!(
                    "{} features, model expects {}",
                    example.features.len(),
                    self.dim
                ),
            });
        }
        if example.class >= self.classes {
            return Err(TrainError::Shape {
                id: example.id.clone(),
                message: format!("class {} with {} classes", example.class, self.classes),
            });
        }
        Ok(())
    }
}

/// Gradients share the model's shape.
pub type Gradient = ToyModel;

/// `log Σ exp(z)` evaluated around the maximum.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-softmax probability of each example's class.
///
/// Panics on an empty batch.
pub fn batch_loss(model: &ToyModel, batch: &[&ToyExample]) -> f64 {
    assert!(!batch.is_empty(), "batch must not be empty");
    let total: f64 = batch
        .iter()
        .map(|ex| {
            let logits = model.logits(&ex.features);
            log_sum_exp(&logits) - logits[ex.class]
        })
        .sum();
    (total / batch.len() as f64).max(0.0)
}

/// Analytic gradient of [`batch_loss`]: `(softmax - onehot) ⊗ x` averaged over the batch.
pub fn gradient(model: &ToyModel, batch: &[&ToyExample]) -> Gradient {
    assert!(!batch.is_empty(), "batch must not be empty");
    let mut grad = ToyModel::zeros(model.classes, model.dim);
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let logits = model.logits(&ex.features);
        let lse = log_sum_exp(&logits);
        for (c, z) in logits.iter().enumerate() {
            let residual = (z - lse).exp() - if c == ex.class { 1.0 } else { 0.0 };
            let row = &mut grad.weights[c * model.dim..(c + 1) * model.dim];
            for (g, x) in row.iter_mut().zip(&ex.features) {
                *g += scale * residual * x;
            }
            grad.bias[c] += scale * residual;
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_tasks: usize,
    pub per_task: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Norm of every cluster center.
    pub radius: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            per_task: 100,
            dim: 8,
            classes: 4,
            noise_sigma: 0.0,
            radius: 1.0,
            seed: 0,
        }
    }
}

/// Cluster centers of one task are accepted once their pairwise cosine stays below this.
const MAX_CENTER_COSINE: f64 = 0.5;
const CENTER_ATTEMPTS: usize = 10_000;

/// Multi-task classification data. Each task owns a contiguous block of
/// feature coordinates and places one Gaussian cluster per class at a random
/// direction inside its block, so the feature-to-class mapping differs per task.
/// Centers share one norm and are distinct within a task, which makes the
/// noise-free data linearly separable whenever every block has at least two
/// coordinates.
pub fn synthesize_multitask(
    config: &SynthConfig,
) -> Result<(Vec<ToyExample>, GroupedDataset), TrainError> {
    let SynthConfig {
        num_tasks,
        per_task,
        dim,
        classes,
        noise_sigma,
        radius,
        seed,
    } = *config;
    if num_tasks == 0 || per_task == 0 || dim == 0 {
        return Err(TrainError::InvalidSynthConfig(
            "tasks, examples per task and dimension must be positive".into(),
        ));
    }
    if classes < 2 {
        return Err(TrainError::InvalidSynthConfig(
            "need at least two classes".into(),
        ));
    }
    if dim < num_tasks {
        return Err(TrainError::InvalidSynthConfig(format!(
            "dimension {dim} cannot hold {num_tasks} task blocks"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) || !(radius > 0.0 && radius.is_finite()) {
        return Err(TrainError::InvalidSynthConfig(
            "noise must be non-negative and radius positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, noise_sigma).expect("checked above");
    let (base, extra) = (dim / num_tasks, dim % num_tasks);

    let mut examples = Vec::with_capacity(num_tasks * per_task);
    let mut groups = IndexMap::new();
    let mut offset = 0;
    for task in 0..num_tasks {
        let width = base + usize::from(task < extra);
        let centers = task_centers(width, classes, radius, &standard, &mut rng);
        let label = GroupLabel::new(format!("task{task}")).expect("non-empty");
        let mut ids = Vec::with_capacity(per_task);
        for i in 0..per_task {
            let class = i % classes;
            let mut features = vec![0.0; dim];
            features[offset..offset + width].copy_from_slice(&centers[class]);
            if noise_sigma > 0.0 {
                for f in features.iter_mut() {
                    *f += noise.sample(&mut rng);
                }
            }
            let id = format!("t{task}-{i:05}");
            ids.push(id.clone());
            examples.push(ToyExample {
                id,
                features,
                class,
                group: label.clone(),
            });
        }
        groups.insert(label, ids);
        offset += width;
    }
    let grouped = GroupedDataset::new(Strategy::Task, GroupParams::default(), groups)
        .expect("synthetic groups are disjoint and non-empty");
    Ok((examples, grouped))
}

fn task_centers(
    width: usize,
    classes: usize,
    radius: f64,
    standard: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..width).map(|_| standard.sample(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| radius * x / norm).collect();
                }
            })
            .collect()
    };
    let max_cosine = |centers: &[Vec<f64>]| {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let dot: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| a * b).sum();
                worst = worst.max(dot / (radius * radius));
            }
        }
        worst
    };
    let mut best = draw(rng);
    let mut best_score = max_cosine(&best);
    for _ in 1..CENTER_ATTEMPTS {
        if best_score <= MAX_CENTER_COSINE {
            break;
        }
        let candidate = draw(rng);
        let score = max_cosine(&candidate);
        if score < best_score {
            best = candidate;
            best_score = score;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Init {
    Zeros,
    Gaussian { sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            init: Init::Zeros,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub group: Option<GroupLabel>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub group: GroupLabel,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub mode: ScheduleMode,
    pub schedule_seed: u64,
    /// Hash identifying the example set.
    pub examples_hash: String,
    /// Batch loss of each step, taken before its update.
    pub loss_trace: Vec<StepLoss>,
    /// Mean loss over all examples after training.
    pub final_loss: f64,
    pub accuracy: Vec<TaskAccuracy>,
    pub model: ToyModel,
}

pub fn examples_hash(examples: &[ToyExample]) -> String {
    sha256_hex(
        serde_json::to_string(examples)
            .expect("examples serialize")
            .as_bytes(),
    )
}

/// Per-group accuracy on `examples`, groups in order of first appearance.
pub fn evaluate(model: &ToyModel, examples: &[ToyExample]) -> Vec<TaskAccuracy> {
    let mut tally: IndexMap<&GroupLabel, (usize, usize)> = IndexMap::new();
    for ex in examples {
        let entry = tally.entry(&ex.group).or_default();
        entry.1 += 1;
        if model.predict(&ex.features) == ex.class {
            entry.0 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(group, (correct, total))| TaskAccuracy {
            group: group.clone(),
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect()
}

/// Plain SGD over the schedule's steps in manifest order.
pub fn train(
    schedule: &Schedule,
    examples: &[ToyExample],
    config: &TrainConfig,
    classes: usize,
) -> Result<TrainRun, TrainError> {
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(TrainError::InvalidConfig(format!(
            "learning rate {} must be finite and non-negative",
            config.learning_rate
        )));
    }
    let dim = examples
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| TrainError::InvalidConfig("no examples".into()))?;
    let mut model = match config.init {
        Init::Zeros => ToyModel::zeros(classes, dim),
        Init::Gaussian { sigma, seed } => ToyModel::gaussian(classes, dim, sigma, seed),
    };
    let by_id: HashMap<&str, &ToyExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    for ex in examples {
        model.check_example(ex)?;
    }

    let mut loss_trace = Vec::with_capacity(schedule.steps.len());
    let mut batch: Vec<&ToyExample> = Vec::new();
    for step in &schedule.steps {
        batch.clear();
        for id in &step.batch.record_ids {
            let ex = by_id
                .get(id.as_str())
                .ok_or_else(|| TrainError::UnresolvedId {
                    id: id.clone(),
                    step: step.step,
                })?;
            batch.push(ex);
        }
        if batch.is_empty() {
            continue;
        }
        loss_trace.push(StepLoss {
            epoch: step.epoch,
            step: step.step,
            group: step.batch.group.clone(),
            loss: batch_loss(&model, &batch),
        });
        if config.learning_rate > 0.0 {
            let grad = gradient(&model, &batch);
            model.add_scaled(&grad, -config.learning_rate);
        }
    }

    let all: Vec<&ToyExample> = examples.iter().collect();
    Ok(TrainRun {
        config: config.clone(),
        mode: schedule.config.mode,
        schedule_seed: schedule.config.seed,
        examples_hash: examples_hash(examples),
        loss_trace,
        final_loss: batch_loss(&model, &all),
        accuracy: evaluate(&model, examples),
        model,
    })
}

impl TrainRun {
    /// Header object followed by one `{epoch, step, group, loss}` line per step.
    pub fn to_jsonl(&self) -> String {
        let header = serde_json::json!({
            "format": "commonit-train-run/1",
            "mode": self.mode,
            "schedule_seed": self.schedule_seed,
            "config": self.config,
            "examples_hash": self.examples_hash,
            "steps": self.loss_trace.len(),
            "final_loss": self.final_loss,
            "accuracy": self.accuracy,
        });
        let mut out = header.to_string();
        out.push('\n');
        for step in &self.loss_trace {
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: ScheduleMode,
    pub steps: usize,
    pub final_loss: f64,
    pub last_step_loss: Option<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub group: GroupLabel,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub a: RunSummary,
    pub b: RunSummary,
    /// `b.final_loss - a.final_loss`.
    pub final_loss_delta: f64,
    /// Which run ended with the lower full-data loss: "a", "b" or "tie".
    pub lower_final_loss: String,
    pub accuracy: Vec<AccuracyRow>,
    pub curve_a: Vec<f64>,
    pub curve_b: Vec<f64>,
}

fn summarize(name: &str, run: &TrainRun) -> RunSummary {
    let mean_accuracy = if run.accuracy.is_empty() {
        0.0
    } else {
        run.accuracy.iter().map(|a| a.accuracy).sum::<f64>() / run.accuracy.len() as f64
    };
    RunSummary {
        name: name.to_owned(),
        mode: run.mode,
        steps: run.loss_trace.len(),
        final_loss: run.final_loss,
        last_step_loss: run.loss_trace.last().map(|s| s.loss),
        mean_accuracy,
    }
}

pub fn compare_runs(
    (name_a, a): (&str, &TrainRun),
    (name_b, b): (&str, &TrainRun),
) -> Result<ComparisonReport, TrainError> {
    if a.examples_hash != b.examples_hash {
        return Err(TrainError::MismatchedExamples);
    }
    let accuracy = a
        .accuracy
        .iter()
        .map(|row_a| {
            let acc_b = b
                .accuracy
                .iter()
                .find(|r| r.group == row_a.group)
                .map_or(0.0, |r| r.accuracy);
            AccuracyRow {
                group: row_a.group.clone(),
                a: row_a.accuracy,
                b: acc_b,
                delta: acc_b - row_a.accuracy,
            }
        })
        .collect();
    let delta = b.final_loss - a.final_loss;
    Ok(ComparisonReport {
        a: summarize(name_a, a),
        b: summarize(name_b, b),
        final_loss_delta: delta,
        lower_final_loss: if delta > 0.0 {
            "a"
        } else if delta < 0.0 {
            "b"
        } else {
            "tie"
        }
        .to_owned(),
        accuracy,
        curve_a: a.loss_trace.iter().map(|s| s.loss).collect(),
        curve_b: b.loss_trace.iter().map(|s| s.loss).collect(),
    })
}
