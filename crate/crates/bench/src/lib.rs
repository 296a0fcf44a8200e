//! Criterion benchmarks for the numerical core live in `benches/`.
