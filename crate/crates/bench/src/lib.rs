//! Criterion benchmarks for the FEM and network kernels; see `benches/`.
