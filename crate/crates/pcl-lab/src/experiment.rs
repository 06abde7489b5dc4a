//! Experiment grids: a JSON spec names a dataset, a list of loss variants
//! with overrides, and a seed list; every (variant, seed) cell trains in
//! isolation, persists its outputs under `output_dir/name/label/seed/`,
//! and the grid aggregates into a comparison table. Completed cells are
//! skipped on re-runs unless forced.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pcl_core::losses::LossKind;
use pcl_core::synthdata::{few_shot_split, make_domain_pair, ShiftSpec};
use pcl_core::training::{train, IntervalMetrics, PseudoLabelConfig, TrainError};
use pcl_core::{AdaptationTask, RunRecord, TrainConfig};

use crate::checkpoint::checkpoint_save;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Synthetic dataset parameters for one experiment.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub shift: ShiftSpec,
    pub shots_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { classes: 4, n_per_class: 50, shift: ShiftSpec::default_benchmark(), shots_per_class: 3 }
    }
}

/// Per-cell knobs layered over the base train config.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOverrides {
    pub lambda_contrastive: Option<f64>,
    pub scale: Option<f64>,
    pub symmetrize: Option<bool>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub pseudo_label: Option<PseudoLabelConfig>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.lambda_contrastive {
            cfg.lambda_contrastive = v;
        }
        if let Some(v) = self.scale {
            cfg.loss.scale = v;
        }
        if let Some(v) = self.symmetrize {
            cfg.loss.symmetrize = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.pseudo_label {
            cfg.pseudo_label = v;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub kind: LossKind,
    #[serde(default)]
    pub overrides: TrainOverrides,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub base: TrainConfig,
    pub grid: Vec<GridEntry>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn filesystem_safe(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ExperimentSpec {
    /// The frozen default study: Baseline (no contrastive term), FCL and
    /// PCL over five seeds on the default benchmark.
    pub fn default_benchmark(name: &str, output_dir: PathBuf) -> Self {
        Self {
            name: name.to_string(),
            dataset: DatasetSpec::default(),
            base: TrainConfig::default(),
            grid: vec![
                GridEntry {
                    label: "Baseline".into(),
                    kind: LossKind::Fcl,
                    overrides: TrainOverrides {
                        lambda_contrastive: Some(0.0),
                        ..TrainOverrides::default()
                    },
                },
                GridEntry {
                    label: "FCL".into(),
                    kind: LossKind::Fcl,
                    overrides: TrainOverrides::default(),
                },
                GridEntry {
                    label: "PCL".into(),
                    kind: LossKind::Pcl,
                    overrides: TrainOverrides::default(),
                },
            ],
            seeds: vec![0, 1, 2, 3, 4],
            output_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !filesystem_safe(&self.name) {
            return Err(ExperimentError::Spec(format!(
                "name {:?} must be non-empty and [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.grid.is_empty() {
            return Err(ExperimentError::Spec("empty grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Spec("empty seed list".into()));
        }
        let mut labels: Vec<&str> = self.grid.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.grid.len() {
            return Err(ExperimentError::Spec("grid labels must be unique".into()));
        }
        if let Some(bad) = self.grid.iter().find(|e| !filesystem_safe(&e.label)) {
            return Err(ExperimentError::Spec(format!(
                "label {:?} must be non-empty and [A-Za-z0-9_-]",
                bad.label
            )));
        }
        self.dataset.shift.validate().map_err(|e| ExperimentError::Spec(e.to_string()))?;
        Ok(())
    }

    fn cell_config(&self, entry: &GridEntry, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.loss.kind = entry.kind;
        cfg.model.num_classes = self.dataset.classes;
        cfg.seed = seed;
        entry.overrides.apply(&mut cfg);
        cfg
    }

    fn cell_dir(&self, entry: &GridEntry, seed: u64) -> PathBuf {
        self.output_dir.join(&self.name).join(&entry.label).join(seed.to_string())
    }
}

/// Persisted outcome of one cell.
#[derive(Serialize, Deserialize)]
pub struct RunOutcomeFile {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<RunRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial_intervals: Vec<IntervalMetrics>,
}

/// Summary metrics of one successful cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CellMetrics {
    pub final_accuracy: f64,
    pub oracle_accuracy: f64,
    pub oracle_gap: f64,
    pub deviation_score: f64,
    pub mean_max_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRow {
    pub label: String,
    pub kind: LossKind,
    pub seed: u64,
    pub cached: bool,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: Option<CellMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub kind: LossKind,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_oracle: f64,
    pub mean_gap: f64,
    pub mean_deviation: f64,
    pub mean_max_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ComparisonTable {
    pub fn all_succeeded(&self) -> bool {
        self.rows.iter().all(|r| r.status == "ok")
    }

    /// Cells that actually trained in this invocation (not served from
    /// cache).
    pub fn freshly_trained(&self) -> usize {
        self.rows.iter().filter(|r| !r.cached && r.status == "ok").count()
    }

    pub fn aggregate(&self, label: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,kind,seed,status,cached,final_accuracy,oracle_accuracy,oracle_gap,deviation_score,mean_max_prob\n",
        );
        for r in &self.rows {
            let m = r.metrics;
            let fmt = |f: fn(&CellMetrics) -> f64| {
                m.as_ref().map_or(String::new(), |m| f(m).to_string())
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.kind,
                r.seed,
                r.status,
                r.cached,
                fmt(|m| m.final_accuracy),
                fmt(|m| m.oracle_accuracy),
                fmt(|m| m.oracle_gap),
                fmt(|m| m.deviation_score),
                fmt(|m| m.mean_max_prob),
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>5} {:>18} {:>8} {:>8} {:>10} {:>9}\n",
            "label", "runs", "accuracy", "oracle", "gap", "deviation", "max-prob"
        ));
        for a in &self.aggregates {
            out.push_str(&format!(
                "{:<12} {:>5} {:>11.3} ±{:>5.3} {:>8.3} {:>8.3} {:>10.3} {:>9.3}\n",
                a.label,
                a.runs,
                a.mean_accuracy,
                a.std_accuracy,
                a.mean_oracle,
                a.mean_gap,
                a.mean_deviation,
                a.mean_max_prob
            ));
        }
        let failed: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.status != "ok")
            .map(|r| format!("{}/{}", r.label, r.seed))
            .collect();
        if !failed.is_empty() {
            out.push_str(&format!("failed cells: {}\n", failed.join(", ")));
        }
        out
    }
}

fn build_task(dataset: &DatasetSpec, seed: u64) -> std::result::Result<AdaptationTask, TrainError> {
    let (source, target) =
        make_domain_pair(dataset.classes, dataset.n_per_class, &dataset.shift, seed)?;
    let few_shot = few_shot_split(&target, dataset.shots_per_class, seed)?;
    AdaptationTask::new(source, target, few_shot)
}

fn write_run_files(
    dir: &Path,
    task: &AdaptationTask,
    record: &RunRecord,
    model: &pcl_core::Model,
    rng: &rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let run_json = dir.join("run.json");
    let outcome = RunOutcomeFile {
        status: "ok".into(),
        error: None,
        record: Some(record.clone()),
        partial_intervals: Vec::new(),
    };
    fs::write(&run_json, serde_json::to_string(&outcome)?).map_err(io_err(&run_json))?;

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = String::from(
        "step,total_loss,ce_loss,contrastive_loss,pseudo_loss,reg_loss,pseudo_count,target_accuracy,mean_max_prob,deviation_score\n",
    );
    for m in &record.intervals {
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            m.step,
            m.total_loss,
            m.ce_loss,
            m.contrastive_loss,
            m.pseudo_loss,
            m.reg_loss,
            m.pseudo_count,
            m.target_accuracy,
            m.mean_max_prob,
            m.deviation_score
        ));
    }
    fs::write(&metrics_path, metrics).map_err(io_err(&metrics_path))?;

    let emb_path = dir.join("embeddings.csv");
    fs::write(&emb_path, embeddings_csv(record)).map_err(io_err(&emb_path))?;
    let weights_path = dir.join("class_weights.csv");
    fs::write(&weights_path, class_weights_csv(record)).map_err(io_err(&weights_path))?;

    let data_path = dir.join("data.csv");
    let mut data = Vec::new();
    task.source.write_csv(&mut data).map_err(io_err(&data_path))?;
    let mut target_buf = Vec::new();
    task.target.write_csv(&mut target_buf).map_err(io_err(&data_path))?;
    // Drop the second header so the file reads as one table.
    if let Some(pos) = target_buf.iter().position(|&b| b == b'\n') {
        data.extend_from_slice(&target_buf[pos + 1..]);
    }
    fs::write(&data_path, data).map_err(io_err(&data_path))?;

    let ckpt_path = dir.join("checkpoint.json");
    checkpoint_save(&ckpt_path, model, rng, &record.config)
        .map_err(|e| ExperimentError::Spec(format!("checkpoint: {e}")))?;
    Ok(())
}

/// Embedding scatter data: one row per sample with its feature vector.
pub fn embeddings_csv(record: &RunRecord) -> String {
    let dim = record.embeddings.feature_dim;
    let mut out = String::from("index,label,domain");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, feat) in record.embeddings.features.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}",
            i, record.embeddings.labels[i], record.embeddings.domains[i]
        ));
        for v in feat {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Class-weight rows aligned with the embedding space.
pub fn class_weights_csv(record: &RunRecord) -> String {
    let dim = record.embeddings.feature_dim;
    let mut out = String::from("class");
    for j in 0..dim {
        out.push_str(&format!(",w{j}"));
    }
    out.push('\n');
    for (c, row) in record.embeddings.class_weights.iter().enumerate() {
        out.push_str(&c.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn load_cached(dir: &Path) -> Option<RunRecord> {
    let text = fs::read_to_string(dir.join("run.json")).ok()?;
    let outcome: RunOutcomeFile = serde_json::from_str(&text).ok()?;
    if outcome.status == "ok" {
        outcome.record
    } else {
        None
    }
}

fn cell_metrics(record: &RunRecord) -> CellMetrics {
    let fd = &record.final_diagnostics;
    CellMetrics {
        final_accuracy: fd.target_accuracy,
        oracle_accuracy: fd.oracle_accuracy,
        oracle_gap: fd.oracle_gap,
        deviation_score: fd.deviation_score,
        mean_max_prob: fd.mean_max_prob,
    }
}

fn run_cell(spec: &ExperimentSpec, entry: &GridEntry, seed: u64, force: bool) -> Result<CellRow> {
    let dir = spec.cell_dir(entry, seed);
    if !force {
        if let Some(record) = load_cached(&dir) {
            return Ok(CellRow {
                label: entry.label.clone(),
                kind: entry.kind,
                seed,
                cached: true,
                status: "ok".into(),
                error: None,
                metrics: Some(cell_metrics(&record)),
            });
        }
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let row = |status: &str, error: Option<String>, metrics: Option<CellMetrics>| CellRow {
        label: entry.label.clone(),
        kind: entry.kind,
        seed,
        cached: false,
        status: status.into(),
        error,
        metrics,
    };

    let cfg = spec.cell_config(entry, seed);
    let task = match build_task(&spec.dataset, seed) {
        Ok(task) => task,
        Err(e) => return Ok(row("failed", Some(e.to_string()), None)),
    };

    match train(&cfg, &task) {
        Ok(outcome) => {
            write_run_files(&dir, &task, &outcome.record, &outcome.model, &outcome.rng)?;
            Ok(row("ok", None, Some(cell_metrics(&outcome.record))))
        }
        Err(TrainError::Diverged { step, intervals }) => {
            let outcome_file = RunOutcomeFile {
                status: "diverged".into(),
                error: Some(format!("non-finite loss or parameters at step {step}")),
                record: None,
                partial_intervals: intervals,
            };
            let run_json = dir.join("run.json");
            fs::write(&run_json, serde_json::to_string(&outcome_file)?)
                .map_err(io_err(&run_json))?;
            Ok(row("failed", outcome_file.error, None))
        }
        Err(e) => Ok(row("failed", Some(e.to_string()), None)),
    }
}

fn aggregate_rows(rows: &[CellRow], grid: &[GridEntry]) -> Vec<AggregateRow> {
    grid.iter()
        .filter_map(|entry| {
            let values: Vec<&CellMetrics> = rows
                .iter()
                .filter(|r| r.label == entry.label && r.status == "ok")
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            if values.is_empty() {
                return None;
            }
            let n = values.len() as f64;
            let mean = |f: fn(&CellMetrics) -> f64| values.iter().map(|m| f(m)).sum::<f64>() / n;
            let mean_acc = mean(|m| m.final_accuracy);
            let var = values
                .iter()
                .map(|m| (m.final_accuracy - mean_acc).powi(2))
                .sum::<f64>()
                / n;
            Some(AggregateRow {
                label: entry.label.clone(),
                kind: entry.kind,
                runs: values.len(),
                mean_accuracy: mean_acc,
                std_accuracy: var.sqrt(),
                mean_oracle: mean(|m| m.oracle_accuracy),
                mean_gap: mean(|m| m.oracle_gap),
                mean_deviation: mean(|m| m.deviation_score),
                mean_max_prob: mean(|m| m.mean_max_prob),
            })
        })
        .collect()
}

/// Runs every (variant, seed) cell — in parallel up to `jobs` — skipping
/// cells already completed on disk unless `force` is set, then writes the
/// aggregated table (`table.csv`, `summary.txt`) under the experiment root.
pub fn run_experiment(spec: &ExperimentSpec, force: bool, jobs: usize) -> Result<ComparisonTable> {
    spec.validate()?;
    let root = spec.output_dir.join(&spec.name);
    fs::create_dir_all(&root).map_err(io_err(&root))?;

    let spec_echo = root.join("spec.json");
    fs::write(&spec_echo, serde_json::to_string_pretty(spec)?).map_err(io_err(&spec_echo))?;

    let cells: Vec<(&GridEntry, u64)> =
        spec.grid.iter().flat_map(|e| spec.seeds.iter().map(move |&s| (e, s))).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Spec(format!("thread pool: {e}")))?;
    let rows: Vec<Result<CellRow>> = pool.install(|| {
        cells.par_iter().map(|(entry, seed)| run_cell(spec, entry, *seed, force)).collect()
    });
    let rows: Vec<CellRow> = rows.into_iter().collect::<Result<_>>()?;

    let table = ComparisonTable { aggregates: aggregate_rows(&rows, &spec.grid), rows };

    let table_path = root.join("table.csv");
    fs::write(&table_path, table.to_csv()).map_err(io_err(&table_path))?;
    let summary_path = root.join("summary.txt");
    let mut summary_file = fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    summary_file.write_all(table.summary().as_bytes()).map_err(io_err(&summary_path))?;
    Ok(table)
}
