pub mod audio;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod oracle;
pub mod rvq;
pub mod sequence;
pub mod tokenizer;

pub use error::{Error, Result};
