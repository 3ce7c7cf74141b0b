//! Numeric substrate: dense `f64` tensors, a closed set of layers with
//! hand-coded backward passes, SGD/RMSprop, a finite-difference gradient
//! checker and the `RPGW` tensor container.

pub mod error;
mod gemm;
pub mod gradcheck;
pub mod io;
pub mod layer;
pub mod net;
pub mod optim;
pub mod tensor;

pub use error::{KernelError, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layer::{Layer, LayerKind};
pub use net::{FeedforwardNet, Gradients, Trace};
pub use optim::{rmsprop_step, sgd_step, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
