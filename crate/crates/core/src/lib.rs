//! Open-world semi-supervised learning on synthetic data.
//!
//! Pseudo-labels for unlabeled samples come from Sinkhorn-Knopp scaling of
//! model predictions against a class prior. A small classifier is trained
//! on labeled data plus cross pseudo-labeled augmented views, with a
//! per-sample softmax temperature derived from Monte-Carlo prediction
//! variance. Evaluation matches clusters to classes with the Hungarian
//! algorithm, and the number of novel classes can be estimated with k-means
//! sweeps scored on the labeled subset.

pub mod data;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod sinkhorn;
pub mod train;
pub mod uncertainty;

pub use data::{AugmentConfig, DatasetSpec, SplitDataset};
pub use error::{Error, Result};
pub use estimate::{Estimate, EstimatorConfig, KmeansResult};
pub use eval::{EvalReport, MatchResult};
pub use model::{
    Architecture, Checkpoint, LrSchedule, ModelParams, OptimizerState, PredictionBatch,
};
pub use numerics::{Matrix, ProbVector, RngStream};
pub use sinkhorn::{
    AssignmentMatrix, ClassPrior, KernelExponent, PseudoLabelBatch, SinkhornConfig,
};
pub use train::{EpochRecord, LabeledBatch, PriorMode, TrainConfig, TrainOutcome, TrainState};
pub use uncertainty::{Reduction, UncertaintyConfig, UncertaintyStore};
