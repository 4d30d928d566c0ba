pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod tokenizers;
pub mod training;

pub use error::{Error, Result};
