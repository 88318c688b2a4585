//! Benchmark-only crate. See `benches/pipeline.rs`; run with
//! `cargo bench -p debrisflow-bench`.
