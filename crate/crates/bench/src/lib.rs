//! Criterion benchmarks for the LEDITS kernels live in `benches/`.
