//! Criterion benchmarks for the timepfn crate; see `benches/`.
