//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every op applied to its [`Var`]s together with a
//! backward rule. Calling [`Tape::backward`] on a scalar walks the tape in
//! reverse, exactly once per node, and accumulates gradients into leaves.
//! The tape is dropped after the step; nothing is reused across passes.

mod kernels;
mod ops_basic;
mod ops_linalg;
mod ops_nn;
mod ops_shape;
mod tape;

pub use ops_nn::{log_softmax_rows, AttnMask};
pub use tape::{Tape, Var};
