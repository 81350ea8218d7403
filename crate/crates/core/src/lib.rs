//! Training framework for small sequence-to-sequence dialogue models.
//!
//! The crate is organised around a handful of layers:
//!
//! * [`tensor`] / [`tape`] — a dense row-major tensor value type and a
//!   tape-based reverse-mode autodiff engine covering exactly the primitives
//!   the model needs, plus a finite-difference checker used throughout the
//!   test suites.
//! * [`corpus`] — TAB-separated dialogue pair files, vocabulary handling,
//!   disjoint subtask partitions, label-noise injection and a deterministic
//!   synthetic corpus generator.
//! * [`model`] — a GRU encoder/decoder with additive attention, parameter
//!   initialisation and a versioned binary checkpoint format.
//! * [`losses`] — the loss algebra: step-wise NLL, teacher/student KL,
//!   gated peer aggregation, fusion, fused-KL and the symmetric JS objective,
//!   each available both as a pure function on probability vectors and as a
//!   tape builder for training.
//! * [`trainer`] — Adam with global-norm clipping and the five training
//!   strategies (`plain`, `kd`, `ct`, `dml`, `mrbd`).
//! * [`eval`] — corpus-level generation metrics, test NLL, prediction
//!   entropy/diversity probes and the noise/perturbation robustness sweeps.
//! * [`seeds`] — named deterministic RNG streams derived from one root seed.

pub mod corpus;
pub mod element;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use element::Element;
pub use error::{Error, Result};
pub use tape::{Gradients, Tape, TensorId};
pub use tensor::TensorValue;

/// Cap the global worker pool at `n` threads (`n ≥ 1`). The first call wins;
/// later calls are no-ops. Results never depend on the pool width — this only
/// bounds parallelism.
pub fn set_worker_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global();
}
