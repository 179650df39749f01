pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod imgproc;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
