//! Benchmark-only crate; see `benches/core_ops.rs`. The library target is
//! intentionally empty — it exists so the bench target has a crate to
//! attach to.
