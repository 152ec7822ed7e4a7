//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations the registration stack needs are provided. Each
//! forward pass records onto its own [`Tape`]; there is no global autodiff
//! state, so independent tapes can run on separate threads.
//!
//! ```
//! use deformreg::ndgrad::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.reduce_sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
//! ```

mod conv;
mod ops;
mod tape;
mod tensor;

pub use ops::{forward_diff_values, Axis};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;
