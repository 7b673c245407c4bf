//! Split-Attention networks built on a small dense-tensor engine.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod splat;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use ops::Mode;
pub use rng::RngState;
pub use tensor::{DType, Scalar, Tensor};
