//! Multi-interest sequential recommendation with time-interval periodicity
//! encoding and star-graph item interaction.
//!
//! The pipeline is split into:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape, multi-head
//!   attention and Adam.
//! * [`dataset`]: CSV ingestion, min-count filtering, user splits, fixed
//!   windows, interval matrices and a planted-interest generator.
//! * [`model`]: parameters and the forward pass (embedding, periodicity,
//!   interactivity, interest extraction) plus checkpoints.
//! * [`training`]: hard interest selection, sampled softmax and the
//!   optimisation loop.
//! * [`retrieval`]: per-interest top-N search, value-function aggregation
//!   and Recall/NDCG/HitRate.
//! * [`run`]: flat `key=value` run configuration shared by the CLI.

pub mod dataset;
pub mod error;
pub mod model;
pub mod retrieval;
pub mod run;
pub mod tensor;
pub mod training;

pub use dataset::{EvalCase, FixedSequence, InteractionLog, IntervalMatrix, TrainingSample};
pub use error::{Error, Result};
pub use model::{Ablation, InterestMatrix, Mode, ModelConfig, ParameterSet};
pub use retrieval::{CandidateSet, MetricsReport};
pub use tensor::{Tape, Tensor, Var};
pub use training::{TrainConfig, TrainReport};

/// Seconds per day used for interval quantisation.
pub const SECONDS_PER_DAY: i64 = 86_400;
