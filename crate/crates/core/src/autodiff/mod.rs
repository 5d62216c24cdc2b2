//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass; [`Var`] is a
//! cheap copyable handle into it. Ops return `Result` so that shape errors
//! and non-finite results surface at the op that produced them.
//!
//! ```
//! use hyperalign::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck, GradCheckReport, InputReport, DEFAULT_STEP};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::Tensor;
