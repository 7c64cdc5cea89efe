//! Small feed-forward networks trained with a penalty that rewards per-layer
//! weight variance, plus one-shot magnitude pruning, segmentation and
//! classification metrics, sharpness probes and convergence checks.

// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod diagnostics;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod reg;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub use math::{SeededRng, Tensor};
pub use model::{Activation, Batch, LayerSpec, LossKind, Network, ParamSet, Targets};
pub use reg::RegConfig;
