//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar replays the record in reverse. Learnable
//! tensors live in a [`ParamStore`] and are copied onto the tape each forward
//! pass, after which [`Gradients::accumulate_into`] routes their gradients
//! back to the store.
//!
//! GELU is the exact Gaussian-CDF form rather than the tanh approximation.

mod error;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GRAD_CHECK_FLOOR};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{gelu, Gradients, SeqSpan, Tape, Var};
pub use tensor::Tensor;
