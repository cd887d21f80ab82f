//! Local self-attention built three equivalent ways — a naive column-based
//! Im2Col lowering, explicit feature shifts, and depthwise/grouped
//! convolution — plus a deformed-shifting module whose two training-time
//! convolution paths merge into one for inference. Cross-path equivalence
//! tests, finite-difference gradient checks, and a latency benchmark harness
//! live alongside the implementations.

pub mod attention;
pub mod bench;
pub mod conv;
pub mod deformed;
pub mod demo;
pub mod error;
pub mod gradcheck;
pub mod im2col;
pub mod shift;
pub mod tensor;
pub mod verify;
pub mod window;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
