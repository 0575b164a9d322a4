//! Command-line pipeline: `group` → `schedule` → `train-demo` / `analyze`.
//!
//! Commands communicate only through files. Every artifact embeds the
//! configuration that produced it, minus the output directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{self, DistanceMetric};
use crate::grouping::{
    self, EmbeddingTable, GroupLabel, GroupedDataset, ReferenceSet, DEFAULT_K, DEFAULT_NUM_BINS,
};
use crate::ingest::{self, LengthBasis};
use crate::scheduler::{self, ScheduleConfig, ScheduleMode, TailPolicy};
use crate::trainer::{self, Init, SynthConfig, TrainConfig};

/// Exit status for bad input: unreadable or invalid files, unmet preconditions.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for failures that are not the input's fault.
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage}: {message}")]
    Input {
        stage: &'static str,
        message: String,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input { .. } => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> Value {
        match self {
            CliError::Input { stage, message } => json!({
                "error": { "kind": "input", "stage": stage, "message": message, "exit_code": EXIT_INPUT }
            }),
            CliError::Internal(message) => json!({
                "error": { "kind": "internal", "message": message, "exit_code": EXIT_INTERNAL }
            }),
        }
    }
}

macro_rules! input_error {
    ($ty:ty, $stage:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Input {
                    stage: $stage,
                    message: e.to_string(),
                }
            }
        }
    };
}

input_error!(ingest::IngestError, "ingest");
input_error!(grouping::GroupingError, "grouping");
input_error!(scheduler::ScheduleError, "schedule");
input_error!(trainer::TrainError, "train");
input_error!(analysis::AnalysisError, "analysis");

#[derive(Debug, Parser)]
#[command(
    name = "commonit",
    version,
    about = "Group instruction-tuning data and build single-group mini-batch schedules"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset file and print a validation report.
    Validate(ValidateArgs),
    /// Partition a dataset into groups.
    Group(GroupArgs),
    /// Build and verify a mini-batch schedule from a grouped file.
    Schedule(ScheduleArgs),
    /// Train the toy classifier under CommonIT and vanilla schedules and compare.
    TrainDemo(TrainDemoArgs),
    /// Category-count and pairwise-distance analyses.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Task,
    Length,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Commonit,
    Vanilla,
    Sequential,
}

impl From<ModeArg> for ScheduleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Commonit => ScheduleMode::CommonIt,
            ModeArg::Vanilla => ScheduleMode::Vanilla,
            ModeArg::Sequential => ScheduleMode::SequentialGroups,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TailArg {
    Keep,
    Drop,
}

impl From<TailArg> for TailPolicy {
    fn from(t: TailArg) -> Self {
        match t {
            TailArg::Keep => TailPolicy::Keep,
            TailArg::Drop => TailPolicy::Drop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "target-tokens")]
    pub length_basis: LengthBasis,
}

#[derive(Debug, Args, Serialize)]
pub struct GroupArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
    pub bins: usize,
    #[arg(long, default_value = "target-tokens")]
    pub length_basis: LengthBasis,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    /// Grouped file; defaults to `<out>/grouped.json`.
    #[arg(long)]
    pub grouped: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TailArg::Keep)]
    pub tail: TailArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Commonit)]
    pub mode: ModeArg,
    /// Reuse the first epoch's batches in every epoch.
    #[arg(long)]
    pub no_repartition: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainDemoArgs {
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 100)]
    pub per_task: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TailArg::Keep)]
    pub tail: TailArg,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Grouped file whose groups provide the category label of each id.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Dataset whose task field provides the category labels (when `--labels` is absent).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Grouped file to sample per group and compare against whole-pool sampling.
    #[arg(long)]
    pub grouped: Option<PathBuf>,
    /// Embedding-format file for the mean pairwise distance.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
    #[arg(long, default_value_t = analysis::DEFAULT_SAMPLE_SIZE)]
    pub sample_size: usize,
    #[arg(long, default_value_t = analysis::DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

fn provenance(command: &str, args: &impl Serialize) -> Value {
    json!({ "command": command, "args": args, "version": env!("CARGO_PKG_VERSION") })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Internal(format!("creating {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str, why: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Input {
        stage: "config",
        message: format!("--{flag} is required {why}"),
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Group(args) => cmd_group(&args),
        Command::Schedule(args) => cmd_schedule(&args),
        Command::TrainDemo(args) => cmd_train_demo(&args),
        Command::Analyze(args) => cmd_analyze(&args),
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let dataset = ingest::load_dataset(&args.dataset)?;
    let report = ingest::validate_dataset(&dataset, args.length_basis);
    print!("{}", pretty(&report));
    Ok(())
}

/// Writes `grouped.json`, `stats.json` and `stats.csv` into `--out`.
pub fn cmd_group(args: &GroupArgs) -> Result<(), CliError> {
    let dataset = ingest::load_dataset(&args.dataset)?;
    let mut grouped = match args.strategy {
        StrategyArg::Task => grouping::group_by_task(&dataset)?,
        StrategyArg::Length => grouping::group_by_length(&dataset, args.bins, args.length_basis)?,
        StrategyArg::Embedding => {
            let embeddings = EmbeddingTable::load(require(
                &args.embeddings,
                "embeddings",
                "for the embedding strategy",
            )?)?;
            let reference = ReferenceSet::load(require(
                &args.reference,
                "reference",
                "for the embedding strategy",
            )?)?;
            grouping::group_by_embedding(&dataset, &embeddings, &reference, args.k)?
        }
    };
    let stats = analysis::group_stats(&grouped, &dataset, args.length_basis)?;
    let prov = provenance("group", args);
    grouped.provenance = Some(prov.clone());

    write(&args.out.join("grouped.json"), &grouped.to_json())?;
    write(
        &args.out.join("stats.json"),
        &pretty(&json!({ "provenance": prov, "stats": stats })),
    )?;
    write(&args.out.join("stats.csv"), &stats.to_csv())?;
    eprintln!(
        "grouped {} records into {} groups ({})",
        dataset.len(),
        grouped.num_groups(),
        grouped.strategy
    );
    Ok(())
}

/// Writes `schedule.jsonl` and `verification.json` into `--out`.
pub fn cmd_schedule(args: &ScheduleArgs) -> Result<(), CliError> {
    let grouped_path = args
        .grouped
        .clone()
        .unwrap_or_else(|| args.out.join("grouped.json"));
    let grouped = GroupedDataset::load(&grouped_path)?;
    let config = ScheduleConfig {
        mode: args.mode.into(),
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        tail_policy: args.tail.into(),
        repartition: !args.no_repartition,
    };
    let mut schedule = scheduler::build_schedule(&grouped, &config)?;
    let prov = provenance("schedule", args);
    schedule.provenance = Some(prov.clone());
    let report = scheduler::verify_schedule(&schedule, &grouped);

    write(&args.out.join("schedule.jsonl"), &schedule.to_manifest())?;
    write(
        &args.out.join("verification.json"),
        &pretty(&json!({ "provenance": prov, "report": report })),
    )?;
    if !report.is_ok() {
        return Err(CliError::Internal(format!(
            "schedule failed verification with {} violations",
            report.violations.len()
        )));
    }
    eprintln!("scheduled {} steps, 0 violations", schedule.len());
    Ok(())
}

/// Writes `run_commonit.jsonl`, `run_vanilla.jsonl` and `comparison.json` into `--out`.
pub fn cmd_train_demo(args: &TrainDemoArgs) -> Result<(), CliError> {
    let (examples, grouped) = trainer::synthesize_multitask(&SynthConfig {
        num_tasks: args.tasks,
        per_task: args.per_task,
        dim: args.dim,
        classes: args.classes,
        noise_sigma: args.noise,
        radius: 1.0,
        seed: args.seed,
    })?;
    let train_config = TrainConfig {
        learning_rate: args.lr,
        init: Init::Zeros,
    };
    let prov = provenance("train-demo", args);
    let mut runs = Vec::new();
    for mode in [ScheduleMode::CommonIt, ScheduleMode::Vanilla] {
        let schedule = scheduler::build_schedule(
            &grouped,
            &ScheduleConfig {
                mode,
                batch_size: args.batch_size,
                epochs: args.epochs,
                seed: args.seed,
                tail_policy: args.tail.into(),
                repartition: true,
            },
        )?;
        let run = trainer::train(&schedule, &examples, &train_config, args.classes)?;
        let mut text = serde_json::to_string(&json!({ "provenance": prov })).expect("json");
        text.push('\n');
        text.push_str(&run.to_jsonl());
        write(
            &args.out.join(format!("run_{}.jsonl", mode.as_str())),
            &text,
        )?;
        runs.push(run);
    }
    let report = trainer::compare_runs(("commonit", &runs[0]), ("vanilla", &runs[1]))?;
    write(
        &args.out.join("comparison.json"),
        &pretty(&json!({ "provenance": prov, "comparison": report })),
    )?;
    eprintln!(
        "final loss: commonit {:.6}, vanilla {:.6}",
        report.a.final_loss, report.b.final_loss
    );
    Ok(())
}

fn labels_from_dataset(path: &Path) -> Result<HashMap<String, GroupLabel>, CliError> {
    let dataset = ingest::load_dataset(path)?;
    let grouped = grouping::group_by_task(&dataset)?;
    Ok(analysis::labels_from_grouping(&grouped))
}

/// Writes `analysis.json` (and `category_counts.csv` when counts were computed) into `--out`.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let labels = match (&args.labels, &args.dataset) {
        (Some(path), _) => Some(analysis::labels_from_grouping(&GroupedDataset::load(path)?)),
        (None, Some(path)) => Some(labels_from_dataset(path)?),
        (None, None) => None,
    };
    if labels.is_none() && args.vectors.is_none() {
        return Err(CliError::Input {
            stage: "config",
            message: "nothing to analyze: give --labels/--dataset and/or --vectors".into(),
        });
    }

    let mut results = serde_json::Map::new();
    let mut csv = None;
    if let Some(labels) = &labels {
        if let Some(path) = &args.grouped {
            let grouped = GroupedDataset::load(path)?;
            let report = analysis::category_correlation(
                &grouped,
                labels,
                args.sample_size,
                args.runs,
                args.seed,
            )?;
            let mut rows = String::from("sampling,group,mean_categories\n");
            rows.push_str(&format!("vanilla,,{:.4}\n", report.vanilla.mean));
            for g in &report.grouped.groups {
                rows.push_str(&format!("grouped,{},{:.4}\n", g.group, g.result.mean));
            }
            rows.push_str(&format!("grouped,(mean),{:.4}\n", report.grouped.mean));
            csv = Some(rows);
            results.insert(
                "category_correlation".into(),
                serde_json::to_value(&report).expect("json"),
            );
        } else {
            let mut ids: Vec<&str> = labels.keys().map(String::as_str).collect();
            ids.sort_unstable();
            let result = analysis::embedding_category_count(
                &ids,
                labels,
                args.sample_size,
                args.runs,
                args.seed,
            )?;
            let mut rows = String::from("run,categories\n");
            for (run, count) in result.counts.iter().enumerate() {
                rows.push_str(&format!("{run},{count}\n"));
            }
            csv = Some(rows);
            results.insert(
                "category_count".into(),
                serde_json::to_value(&result).expect("json"),
            );
        }
    }
    if let Some(path) = &args.vectors {
        let table = grouping::vectors::load_id_vectors(path)?;
        let vectors: Vec<&[f64]> = table.values().map(Vec::as_slice).collect();
        let metric = match args.metric {
            MetricArg::Euclidean => DistanceMetric::Euclidean,
            MetricArg::Cosine => DistanceMetric::Cosine,
        };
        let distance = analysis::mean_pairwise_distance(&vectors, metric)?;
        results.insert(
            "mean_pairwise_distance".into(),
            json!({ "metric": metric, "vectors": vectors.len(), "value": distance }),
        );
    }

    write(
        &args.out.join("analysis.json"),
        &pretty(&json!({ "provenance": provenance("analyze", args), "results": results })),
    )?;
    if let Some(rows) = csv {
        write(&args.out.join("category_counts.csv"), &rows)?;
    }
    Ok(())
}
