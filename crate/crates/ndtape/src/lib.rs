//! Minimal dense tensors with define-by-run reverse-mode differentiation.
//!
//! ```
//! use ndtape::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod dense;
mod error;
pub mod interp;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use conv::Padding;
pub use dense::Head;
pub use error::{Result, TapeError};
pub use ops::{fast_exp, gelu, gelu_grad, gelu_with_grad, sigmoid, softplus};
pub use optim::Adam;
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorContainer};
