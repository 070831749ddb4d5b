pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
