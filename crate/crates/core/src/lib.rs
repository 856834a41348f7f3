pub mod cli;
pub mod cm;
pub mod data;
pub mod error;
pub mod model;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
