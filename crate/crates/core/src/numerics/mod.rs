//! Dense f64 tensors, a define-by-run differentiation tape, the
//! named-tensor checkpoint container, and finite-difference gradient
//! verification.

pub mod alloc;
pub mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Tape, Value};
pub use tensor::{argmax, cosine_similarity, softplus, Tensor};
