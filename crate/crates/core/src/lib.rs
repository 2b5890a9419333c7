pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod scenario;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
