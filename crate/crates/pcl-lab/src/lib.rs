//! Experiment orchestration over the contrastive-loss family: JSON-specified
//! grids of (loss variant, seed) cells on synthetic domain shifts, cached
//! per-cell run directories, checkpoints, comparison tables, and plot-ready
//! CSV exports.

pub mod checkpoint;
pub mod experiment;
pub mod export;
pub mod selfcheck;

pub use checkpoint::{checkpoint_load, checkpoint_save, CheckpointError};
pub use experiment::{
    run_experiment, AggregateRow, CellRow, ComparisonTable, DatasetSpec, ExperimentError,
    ExperimentSpec, GridEntry, TrainOverrides,
};
pub use export::{emit_plot_data, EmitSummary};
pub use selfcheck::{self_check, CheckOutcome};
