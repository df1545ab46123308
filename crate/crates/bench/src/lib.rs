//! Benchmark-only crate; see `benches/segmentation.rs`. The library target
//! exists so the package has something to build outside `cargo bench`.
