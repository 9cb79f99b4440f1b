//! Interaction logs, preprocessing, windowing and synthetic data.

mod log;
pub mod synth;
mod window;

pub use log::{
    filter_min_count, ingest, ingest_with_vocab, parse_csv, split_users, Event, Interaction,
    InteractionLog, Vocabulary, CSV_HEADER,
};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData};
pub use window::{
    build_training_samples, eval_cases, eval_split, interval_matrix, EvalCase, FixedSequence,
    IntervalMatrix, TrainingSample, PAD_TIMESTAMP,
};
