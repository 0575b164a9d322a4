//! Single-group mini-batch construction and seeded batch-order shuffling.
//!
//! Every epoch draws a fresh ChaCha8 stream (stream id = epoch index) from the
//! schedule seed. The stream first shuffles each group's ids, which are then
//! sliced into batches, and then shuffles the resulting batch list.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::{GroupLabel, GroupedDataset};
use crate::sha256_hex;

/// Identifies the random generator so a manifest records how it was drawn.
pub const GENERATOR_ID: &str = "chacha8/rand_chacha-0.9/stream=epoch";

/// Stream used for the one-off partitioning when batches are reused across epochs.
const FIXED_PARTITION_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("grouping has no records")]
    EmptyGrouping,
    #[error("every group is smaller than the batch size {batch_size}; dropping tails leaves nothing to train on")]
    AllGroupsTooSmall { batch_size: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Homogeneous batches, batch order shuffled across groups.
    #[serde(rename = "commonit")]
    CommonIt,
    /// Ignore groups: shuffle all ids, then slice.
    #[serde(rename = "vanilla")]
    Vanilla,
    /// Homogeneous batches, each group's batches run back to back.
    #[serde(rename = "sequential")]
    SequentialGroups,
}

impl ScheduleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleMode::CommonIt => "commonit",
            ScheduleMode::Vanilla => "vanilla",
            ScheduleMode::SequentialGroups => "sequential",
        }
    }

    pub fn is_grouped(&self) -> bool {
        !matches!(self, ScheduleMode::Vanilla)
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "commonit" => Ok(ScheduleMode::CommonIt),
            "vanilla" => Ok(ScheduleMode::Vanilla),
            "sequential" => Ok(ScheduleMode::SequentialGroups),
            _ => Err(format!(
                "unknown mode `{s}` (expected commonit, vanilla or sequential)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailPolicy {
    #[default]
    Keep,
    Drop,
}

impl FromStr for TailPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keep" => Ok(TailPolicy::Keep),
            "drop" => Ok(TailPolicy::Drop),
            _ => Err(format!("unknown tail policy `{s}` (expected keep or drop)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// `None` for vanilla batches, which may mix groups.
    pub group: Option<GroupLabel>,
    pub record_ids: Vec<String>,
    pub is_tail: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub epoch: usize,
    /// Global step index, counted from 0 across all epochs.
    pub step: usize,
    pub batch: Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tail_policy: TailPolicy,
    /// Re-slice groups into new batches every epoch (otherwise epoch 0's
    /// batches are reused and only their order changes).
    pub repartition: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::CommonIt,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            tail_policy: TailPolicy::Keep,
            repartition: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub config: ScheduleConfig,
    pub generator: String,
    /// Hash of the grouping the schedule was built from.
    pub grouping_hash: String,
    pub provenance: Option<serde_json::Value>,
    pub steps: Vec<Step>,
}

pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// In-place Fisher-Yates shuffle.
pub fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn slice_into_batches(
    group: Option<&GroupLabel>,
    ids: &[String],
    batch_size: usize,
    tail_policy: TailPolicy,
    out: &mut Vec<Batch>,
) {
    for chunk in ids.chunks(batch_size) {
        let is_tail = chunk.len() < batch_size;
        if is_tail && tail_policy == TailPolicy::Drop {
            continue;
        }
        out.push(Batch {
            group: group.cloned(),
            record_ids: chunk.to_vec(),
            is_tail,
        });
    }
}

/// Shuffles each group's ids and slices them into runs of `batch_size`, in
/// group order. A short final run is kept as a tail batch or dropped.
pub fn build_partitions<R: Rng + ?Sized>(
    grouped: &GroupedDataset,
    batch_size: usize,
    tail_policy: TailPolicy,
    rng: &mut R,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut batches = Vec::new();
    for (label, ids) in &grouped.groups {
        let mut ids = ids.clone();
        fisher_yates(&mut ids, rng);
        slice_into_batches(Some(label), &ids, batch_size, tail_policy, &mut batches);
    }
    batches
}

/// Uniformly random batch order.
pub fn shuffle_schedule<R: Rng + ?Sized>(mut batches: Vec<Batch>, rng: &mut R) -> Vec<Batch> {
    fisher_yates(&mut batches, rng);
    batches
}

fn vanilla_batches<R: Rng + ?Sized>(
    grouped: &GroupedDataset,
    batch_size: usize,
    tail_policy: TailPolicy,
    rng: &mut R,
) -> Vec<Batch> {
    let mut ids: Vec<String> = grouped.all_ids().map(str::to_owned).collect();
    fisher_yates(&mut ids, rng);
    let mut batches = Vec::new();
    slice_into_batches(None, &ids, batch_size, tail_policy, &mut batches);
    batches
}

/// Groups run back to back in a random group order; within a group, batches
/// keep their slicing order.
fn sequential_order<R: Rng + ?Sized>(batches: Vec<Batch>, rng: &mut R) -> Vec<Batch> {
    let mut by_group: Vec<(Option<GroupLabel>, Vec<Batch>)> = Vec::new();
    for batch in batches {
        match by_group.iter_mut().find(|(g, _)| *g == batch.group) {
            Some((_, list)) => list.push(batch),
            None => by_group.push((batch.group.clone(), vec![batch])),
        }
    }
    fisher_yates(&mut by_group, rng);
    by_group.into_iter().flat_map(|(_, list)| list).collect()
}

pub fn build_schedule(
    grouped: &GroupedDataset,
    config: &ScheduleConfig,
) -> Result<Schedule, ScheduleError> {
    if config.batch_size == 0 {
        return Err(ScheduleError::ZeroBatchSize);
    }
    if config.epochs == 0 {
        return Err(ScheduleError::ZeroEpochs);
    }
    if grouped.num_records() == 0 {
        return Err(ScheduleError::EmptyGrouping);
    }
    if config.tail_policy == TailPolicy::Drop {
        let largest = if config.mode.is_grouped() {
            grouped.groups.values().map(Vec::len).max().unwrap_or(0)
        } else {
            grouped.num_records()
        };
        if largest < config.batch_size {
            return Err(ScheduleError::AllGroupsTooSmall {
                batch_size: config.batch_size,
            });
        }
    }

    let make_batches = |rng: &mut ChaCha8Rng| match config.mode {
        ScheduleMode::Vanilla => {
            vanilla_batches(grouped, config.batch_size, config.tail_policy, rng)
        }
        _ => build_partitions(grouped, config.batch_size, config.tail_policy, rng),
    };
    let fixed = (!config.repartition)
        .then(|| make_batches(&mut epoch_rng(config.seed, FIXED_PARTITION_STREAM)));

    let mut steps = Vec::new();
    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch as u64);
        let batches = match &fixed {
            Some(batches) => batches.clone(),
            None => make_batches(&mut rng),
        };
        let ordered = match config.mode {
            ScheduleMode::SequentialGroups => sequential_order(batches, &mut rng),
            _ => shuffle_schedule(batches, &mut rng),
        };
        for batch in ordered {
            steps.push(Step {
                epoch,
                step: steps.len(),
                batch,
            });
        }
    }
    Ok(Schedule {
        config: config.clone(),
        generator: GENERATOR_ID.to_owned(),
        grouping_hash: grouping_hash(grouped),
        provenance: None,
        steps,
    })
}

/// Hash of a grouping's partition content (strategy, params and groups).
pub fn grouping_hash(grouped: &GroupedDataset) -> String {
    let content = serde_json::json!({
        "strategy": grouped.strategy,
        "params": grouped.params,
        "groups": grouped.groups,
    });
    sha256_hex(content.to_string().as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    #[serde(flatten)]
    config: ScheduleConfig,
    generator: String,
    grouping_hash: String,
    num_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestStep {
    epoch: usize,
    step: usize,
    group: Option<GroupLabel>,
    ids: Vec<String>,
    tail: bool,
}

const MANIFEST_FORMAT: &str = "commonit-schedule/1";

impl Schedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Header line followed by one line per step.
    pub fn to_manifest(&self) -> String {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.to_owned(),
            config: self.config.clone(),
            generator: self.generator.clone(),
            grouping_hash: self.grouping_hash.clone(),
            num_steps: self.steps.len(),
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for step in &self.steps {
            let line = ManifestStep {
                epoch: step.epoch,
                step: step.step,
                group: step.batch.group.clone(),
                ids: step.batch.record_ids.clone(),
                tail: step.batch.is_tail,
            };
            out.push_str(&serde_json::to_string(&line).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a manifest. Steps are returned in file order; ordering problems
    /// are left for [`verify_schedule`] to report.
    pub fn from_manifest(text: &str) -> Result<Self, ScheduleError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(ScheduleError::Manifest {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| ScheduleError::Manifest {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        if header.format != MANIFEST_FORMAT {
            return Err(ScheduleError::Manifest {
                line: 1,
                message: format!("unsupported format `{}`", header.format),
            });
        }
        let mut steps = Vec::with_capacity(header.num_steps);
        for (idx, line) in lines {
            let step: ManifestStep =
                serde_json::from_str(line).map_err(|e| ScheduleError::Manifest {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            steps.push(Step {
                epoch: step.epoch,
                step: step.step,
                batch: Batch {
                    group: step.group,
                    record_ids: step.ids,
                    is_tail: step.tail,
                },
            });
        }
        if steps.len() != header.num_steps {
            return Err(ScheduleError::Manifest {
                line: text.lines().count(),
                message: format!(
                    "header announces {} steps, found {}",
                    header.num_steps,
                    steps.len()
                ),
            });
        }
        Ok(Self {
            config: header.config,
            generator: header.generator,
            grouping_hash: header.grouping_hash,
            provenance: header.provenance,
            steps,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScheduleError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScheduleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_manifest(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Homogeneity,
    BatchSize,
    Ordering,
    Coverage,
    Drops,
    Contiguity,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub mode: ScheduleMode,
    pub steps: usize,
    pub epochs: usize,
    /// Records left out of each epoch.
    pub dropped_per_epoch: Vec<usize>,
    /// Records the tail policy is expected to leave out per epoch.
    pub expected_dropped: usize,
    pub grouping_hash_matches: bool,
    /// Hash of the manifest serialization.
    pub determinism_hash: String,
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Records the tail policy drops per epoch.
pub fn expected_drops(grouped: &GroupedDataset, config: &ScheduleConfig) -> usize {
    match (config.tail_policy, config.mode) {
        (TailPolicy::Keep, _) => 0,
        (TailPolicy::Drop, ScheduleMode::Vanilla) => grouped.num_records() % config.batch_size,
        (TailPolicy::Drop, _) => grouped
            .groups
            .values()
            .map(|ids| ids.len() % config.batch_size)
            .sum(),
    }
}

/// Checks a schedule against the grouping it claims to be built from.
pub fn verify_schedule(schedule: &Schedule, grouped: &GroupedDataset) -> VerificationReport {
    let config = &schedule.config;
    let mut violations = Vec::new();
    let mut push = |kind, step: Option<usize>, epoch: Option<usize>, message: String| {
        violations.push(Violation {
            kind,
            step,
            epoch,
            message,
        })
    };

    if config.batch_size == 0 || config.epochs == 0 {
        push(
            ViolationKind::Config,
            None,
            None,
            "batch size and epochs must be positive".into(),
        );
    }
    let label_of = grouped.label_of();
    let expected_dropped = expected_drops(grouped, config);
    let mut seen: Vec<HashSet<&str>> = vec![HashSet::new(); config.epochs];
    // per epoch: group -> (first position, last position, step count)
    type Spans<'a> = HashMap<Option<&'a GroupLabel>, (usize, usize, usize)>;
    let mut spans: Vec<Spans> = vec![HashMap::new(); config.epochs];
    let mut last_epoch = 0;

    for (pos, step) in schedule.steps.iter().enumerate() {
        let at = Some(step.step);
        if step.step != pos {
            push(
                ViolationKind::Ordering,
                at,
                Some(step.epoch),
                format!("step index {} at position {pos}", step.step),
            );
        }
        if step.epoch >= config.epochs || step.epoch < last_epoch {
            push(
                ViolationKind::Ordering,
                at,
                Some(step.epoch),
                format!("epoch {} out of order or out of range", step.epoch),
            );
            continue;
        }
        last_epoch = step.epoch;

        let batch = &step.batch;
        let len = batch.record_ids.len();
        if len == 0 || len > config.batch_size || (len < config.batch_size) != batch.is_tail {
            push(
                ViolationKind::BatchSize,
                at,
                Some(step.epoch),
                format!(
                    "batch of {len} (tail = {}) with batch size {}",
                    batch.is_tail, config.batch_size
                ),
            );
        }
        if batch.is_tail && config.tail_policy == TailPolicy::Drop {
            push(
                ViolationKind::BatchSize,
                at,
                Some(step.epoch),
                "tail batch present under drop policy".into(),
            );
        }

        if config.mode.is_grouped() {
            match &batch.group {
                None => push(
                    ViolationKind::Homogeneity,
                    at,
                    Some(step.epoch),
                    "batch has no group".into(),
                ),
                Some(group) => {
                    let foreign: Vec<&str> = batch
                        .record_ids
                        .iter()
                        .filter(|id| label_of.get(id.as_str()) != Some(&group))
                        .map(String::as_str)
                        .collect();
                    if !foreign.is_empty() {
                        push(
                            ViolationKind::Homogeneity,
                            at,
                            Some(step.epoch),
                            format!(
                                "batch labeled `{group}` contains ids from other groups: {}",
                                foreign.join(", ")
                            ),
                        );
                    }
                }
            }
        }

        let span = spans[step.epoch]
            .entry(batch.group.as_ref())
            .or_insert((pos, pos, 0));
        span.1 = pos;
        span.2 += 1;

        for id in &batch.record_ids {
            if !label_of.contains_key(id.as_str()) {
                push(
                    ViolationKind::Coverage,
                    at,
                    Some(step.epoch),
                    format!("unknown id `{id}`"),
                );
            } else if !seen[step.epoch].insert(id.as_str()) {
                push(
                    ViolationKind::Coverage,
                    at,
                    Some(step.epoch),
                    format!("id `{id}` scheduled twice in epoch {}", step.epoch),
                );
            }
        }
    }

    let total = grouped.num_records();
    let mut dropped_per_epoch = Vec::with_capacity(config.epochs);
    for (epoch, ids) in seen.iter().enumerate() {
        let dropped = total.saturating_sub(ids.len());
        dropped_per_epoch.push(dropped);
        if dropped != expected_dropped {
            push(
                ViolationKind::Drops,
                None,
                Some(epoch),
                format!("{dropped} records missing, expected {expected_dropped}"),
            );
        }
        if config.tail_policy == TailPolicy::Drop && config.mode.is_grouped() {
            for (label, group_ids) in &grouped.groups {
                let missing = group_ids
                    .iter()
                    .filter(|id| !ids.contains(id.as_str()))
                    .count();
                if missing != group_ids.len() % config.batch_size {
                    push(
                        ViolationKind::Drops,
                        None,
                        Some(epoch),
                        format!("group `{label}` lost {missing} records"),
                    );
                }
            }
        }
    }

    if config.mode == ScheduleMode::SequentialGroups {
        for (epoch, groups) in spans.iter().enumerate() {
            for (label, (first, last, count)) in groups {
                if last - first + 1 != *count {
                    push(
                        ViolationKind::Contiguity,
                        Some(*first),
                        Some(epoch),
                        format!(
                            "group `{}` is interleaved with other groups",
                            label.map(GroupLabel::as_str).unwrap_or("-")
                        ),
                    );
                }
            }
        }
    }

    violations.sort_by_key(|v| (v.epoch, v.step));
    VerificationReport {
        mode: config.mode,
        steps: schedule.steps.len(),
        epochs: config.epochs,
        dropped_per_epoch,
        expected_dropped,
        grouping_hash_matches: schedule.grouping_hash == grouping_hash(grouped),
        determinism_hash: sha256_hex(schedule.to_manifest().as_bytes()),
        violations,
    }
}
