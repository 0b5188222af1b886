pub mod analysis;
pub mod cli;
pub mod data;
pub mod eval;
pub mod error;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod parallel;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
