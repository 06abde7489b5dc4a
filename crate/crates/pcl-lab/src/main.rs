use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pcl_lab::{emit_plot_data, run_experiment, self_check, ExperimentSpec};

#[derive(Parser)]
#[command(name = "pcl-lab", about = "Contrastive-loss experiments on synthetic domain shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid described by a JSON spec.
    Run {
        /// Path to the experiment spec (JSON).
        spec: PathBuf,
        /// Retrain cells even if their run directories are complete.
        #[arg(long)]
        force: bool,
        /// Parallel cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the built-in invariant and oracle suite.
    Check,
    /// Emit plot-ready CSV bundles from completed run directories.
    Export {
        /// Experiment root holding <label>/<seed>/run.json trees.
        dir: PathBuf,
        /// Output directory (defaults to <dir>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { spec, force, jobs } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let spec: ExperimentSpec =
                serde_json::from_str(&text).context("parsing experiment spec")?;
            let table = run_experiment(&spec, force, jobs)?;
            print!("{}", table.summary());
            println!(
                "{} cells ({} freshly trained), table under {}",
                table.rows.len(),
                table.freshly_trained(),
                spec.output_dir.join(&spec.name).display()
            );
            Ok(if table.all_succeeded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Check => {
            let mut all_ok = true;
            for check in self_check() {
                let tag = if check.passed { "ok  " } else { "FAIL" };
                println!("{tag} {} — {}", check.name, check.detail);
                all_ok &= check.passed;
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Export { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("plots"));
            let summary = emit_plot_data(&dir, &out)?;
            println!("wrote {} files to {}", summary.written.len(), out.display());
            for gap in &summary.missing {
                eprintln!("warning: no completed run at {gap}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
