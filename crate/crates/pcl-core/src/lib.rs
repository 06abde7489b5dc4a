//! Contrastive losses on features, logits and probabilities, a tape-based
//! reverse-mode autodiff core sized for them, synthetic planar
//! domain-adaptation benchmarks, and the training recipe plus diagnostics
//! that compare the variants.
//!
//! The numeric core is generic over the scalar type ([`numerics::Scalar`],
//! implemented for `f32` and `f64`); the aliases at the crate root pin the
//! default `f64` instantiation used by the experiment harness.

pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use losses::{LossError, LossKind};
pub use numerics::{NumericsError, Scalar, Var};
pub use synthdata::{Domain, FewShotSplit, ShiftSpec};
pub use training::{
    AdaptationTask, EvalMetrics, FinalDiagnostics, IntervalMetrics, RunRecord, TrainConfig,
    TrainError, TrainOutcome,
};

/// Double-precision tensor, the default instantiation.
pub type Tensor = numerics::Tensor<f64>;
/// Double-precision gradient tape.
pub type Tape = numerics::Tape<f64>;
/// Double-precision loss configuration.
pub type LossConfig = losses::LossConfig<f64>;
/// Double-precision projection head for the NTCL variant.
pub type ProjectionHead = losses::ProjectionHead<f64>;
/// Double-precision model.
pub type Model = model::Model<f64>;
/// Double-precision dataset.
pub type DomainDataset = synthdata::DomainDataset<f64>;
