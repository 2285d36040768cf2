pub mod autodiff;
pub mod data;
pub mod error;
pub mod generator;
pub mod hungarian;
pub mod metrics;
pub mod model;
pub mod seve;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
