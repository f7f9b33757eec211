pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{DType, Tape, Tensor, Var};
