//! Dense arrays with reverse-mode gradients, the Adam optimizer and the
//! checkpoint format.

mod backward;
pub mod checkpoint;
mod error;
pub mod init;
mod ops;
pub mod optim;
mod tensor;

pub use error::{NumericsError, Result};
pub use ops::{dropout_mask, LAYER_NORM_EPS};
pub use optim::{zero_grads, Adam, AdamConfig};
pub use tensor::{grad_enabled, no_grad, Tensor};
