//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records a single forward computation; [`Tape::backward`]
//! produces exact gradients for every tracked leaf. Tapes are
//! single-threaded; independent tapes (one per window or per scene job)
//! run in parallel.

mod adam;
mod checkpoint;
mod finite_diff;
mod tape;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{load_named_tensors, save_named_tensors, NamedTensor};
pub use finite_diff::finite_diff_check;
pub use tape::{AutogradError, Gradients, Tape, TensorId};
