//! Criterion benchmarks for the fieldlearn engine; see `benches/`.
