//! Criterion benchmarks for the normal-estimation pipeline; see `benches/`.
