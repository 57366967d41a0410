//! Dense matrices, reverse-mode autodiff, RMSprop and checkpoints.

pub mod checkpoint;
pub mod rmsprop;
pub mod tape;
pub mod tensor;

pub use rmsprop::{RmsProp, RmsPropConfig};
pub use tape::{Gradients, LogitSub, Tape, Var};
pub use tensor::{Tensor, TensorError};

/// Element type of every tensor: `f64` unless the `f32` feature is on.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;
