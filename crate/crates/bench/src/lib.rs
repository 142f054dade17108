//! Criterion benchmarks for the numeric kernels and a training step live in `benches/`.
