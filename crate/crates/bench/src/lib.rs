//! Criterion benchmarks for the hot paths of `loopdet-core`; see `benches/`.
