pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod lm;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod segment;
pub mod train;
pub mod tts;

pub use error::{Error, ErrorCategory, Result};
