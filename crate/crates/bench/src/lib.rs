//! Criterion benchmarks for the hot kernels live under `benches/`.
//! Run them with `cargo bench -p scfl-bench`.
