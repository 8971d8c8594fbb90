//! Scale-invariant optimization laboratory: losses, optimizers with weight decay and
//! relative global clipping, homogeneity checkers, clipped-mean statistics, and a small
//! scale-invariant transformer encoder.

pub mod bounds;
pub mod clipstats;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod homogeneity;
pub mod losses;
pub mod optim;
pub mod sinet;
pub mod tape;
pub mod tensor;
pub mod vecmath;

pub use error::{Error, Result};
pub use tensor::Tensor;
