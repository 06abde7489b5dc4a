//! Plot-ready CSV bundles from completed run directories: bar-chart rows
//! (actual vs oracle accuracy per run) and per-run embedding scatter data
//! with the matching class-weight rows.

use std::fs;
use std::path::{Path, PathBuf};

use crate::experiment::{class_weights_csv, embeddings_csv, RunOutcomeFile};

#[derive(Debug, Default)]
pub struct EmitSummary {
    pub written: Vec<PathBuf>,
    /// Run directories without a completed record, listed as warnings.
    pub missing: Vec<String>,
}

/// Scans `runs_root/<label>/<seed>/run.json` and writes the plot bundles
/// into `out_dir`. Missing or failed runs produce warnings, not errors;
/// with no completed runs the bar-chart file still appears with only its
/// header.
pub fn emit_plot_data(runs_root: &Path, out_dir: &Path) -> std::io::Result<EmitSummary> {
    let mut summary = EmitSummary::default();
    fs::create_dir_all(out_dir)?;

    let mut bar = String::from("label,seed,actual_accuracy,oracle_accuracy\n");
    let mut labels = list_dirs(runs_root)?;
    labels.sort();
    for label_dir in labels {
        let label = name_of(&label_dir);
        let mut seeds = list_dirs(&label_dir)?;
        seeds.sort_by_key(|p| name_of(p).parse::<u64>().unwrap_or(u64::MAX));
        for seed_dir in seeds {
            let seed = name_of(&seed_dir);
            let run_json = seed_dir.join("run.json");
            let record = fs::read_to_string(&run_json)
                .ok()
                .and_then(|text| serde_json::from_str::<RunOutcomeFile>(&text).ok())
                .and_then(|outcome| (outcome.status == "ok").then_some(outcome.record).flatten());
            let Some(record) = record else {
                summary.missing.push(format!("{label}/{seed}"));
                continue;
            };
            let fd = &record.final_diagnostics;
            bar.push_str(&format!(
                "{label},{seed},{},{}\n",
                fd.target_accuracy, fd.oracle_accuracy
            ));

            let emb = out_dir.join(format!("embeddings_{label}_seed{seed}.csv"));
            fs::write(&emb, embeddings_csv(&record))?;
            summary.written.push(emb);
            let weights = out_dir.join(format!("class_weights_{label}_seed{seed}.csv"));
            fs::write(&weights, class_weights_csv(&record))?;
            summary.written.push(weights);
        }
    }

    let bar_path = out_dir.join("bar_chart.csv");
    fs::write(&bar_path, bar)?;
    summary.written.push(bar_path);
    Ok(summary)
}

fn list_dirs(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    Ok(out)
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
