//! Criterion benchmarks for the hot vdforge kernels live in `benches/`.
