//! Variable-tokenized vision transformer for gridded weather and climate
//! prediction, with its own autodiff engine, data pipeline, metrics and
//! training protocols.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod grid;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use tensor::{ParamStore, Scalar, Tensor};
