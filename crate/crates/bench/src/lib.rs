//! Criterion benchmarks for the numeric kernels; see `benches/`.
