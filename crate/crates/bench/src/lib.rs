//! Criterion benchmarks for ropelab; see `benches/`.
