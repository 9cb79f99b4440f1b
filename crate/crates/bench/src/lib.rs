//! Criterion benchmarks for the forward pass, training step and retrieval.
//! See `benches/`.
