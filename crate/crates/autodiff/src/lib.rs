//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Tensors are rank 0 (scalars) or rank 2 (matrices, row-major). The tape
//! is rebuilt on every forward pass, so loops whose length is only known
//! at run time can be differentiated directly.
//!
//! ```
//! use jkoflow_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
//! let y = x.square().unwrap().sum().unwrap();
//! let g = tape.backward(&y, &[&x]).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0]);
//! ```
//!
//! Gradients can be recorded (`create_graph = true` in [`Tape::grad`]) and
//! differentiated again, which is how optimizer loops are unrolled.

mod check;
mod error;
mod tape;
mod tensor;

pub use check::{finite_diff_check, max_relative_error, numeric_gradient};
pub use error::{AdError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
