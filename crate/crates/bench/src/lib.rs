//! Criterion benchmarks for the forest-structure kernels and pipeline; see `benches/`.
