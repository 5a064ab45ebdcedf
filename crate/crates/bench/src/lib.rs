//! Criterion benchmarks for `ptz-core`; see `benches/`.
