//! Benchmarks live in `benches/`; run them with `cargo bench -p xalign-bench`.

pub use xalign_core;
