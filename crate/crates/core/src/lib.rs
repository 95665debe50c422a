//! Monocular depth estimation with a multiscale transformer encoder, an
//! iterative skip-fusion decoder and an adaptive depth-bin head.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod error;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
