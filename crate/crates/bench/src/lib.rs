//! Criterion benchmarks for the simulator, the estimator network and a full
//! insertion episode. Run with `cargo bench -p dlo-bench`.
