pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod grid;
pub mod net;
pub mod polar;
pub mod tensor;

pub use error::{Error, Result};
