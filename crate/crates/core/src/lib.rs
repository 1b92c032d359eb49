//! Numeric kernels for critical-region windowed attention and scale-aware
//! feature gating, with a finite-difference gradient checker and COCO-style
//! detection metrics.

pub mod crselector;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod io;
pub mod rng;
pub mod sca;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Conv1x1Params, Matrix, Scalar, Shape, Tensor};
