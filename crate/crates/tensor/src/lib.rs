//! Dense CPU tensors, deterministic kernels and a reverse-mode tape.

pub mod conv;
mod element;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
pub mod snapshot;
mod tape;
mod tensor;

pub use conv::Conv3dSpec;
pub use element::{el, DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, gradient_check_params, ParamCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{gelu, Gradients, PairRotation, Tape, Var};
pub use tensor::Tensor;
