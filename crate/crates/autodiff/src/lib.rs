//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records each primitive applied to [`Var`]s during the forward
//! pass; [`Tape::backward`] then walks the records in reverse and accumulates
//! gradients into the leaves created with [`Tape::param`].
//!
//! ```
//! use augsearch_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::scalar(0.0));
//! let x = tape.constant(Tensor::scalar(1.0));
//! let y = w.mul(x).unwrap().sigmoid();
//! y.backward().unwrap();
//! assert_eq!(tape.grad(w).unwrap().item(), Some(0.25));
//! ```
//!
//! The engine is single-threaded and deterministic: the same inputs always
//! produce bitwise-identical values and gradients.

mod backward;
mod composite;
mod conv;
mod elementwise;
mod error;
mod linalg;
pub mod numeric;
mod reduce;
mod sample;
mod structural;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use elementwise::{BinaryKind, UnaryKind};
pub use error::{AutodiffError, Result};
pub use reduce::ReduceKind;
pub use sample::{pixel_center, unnormalize};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f32) -> f32 {
    elementwise::sigmoid(x)
}
