pub mod compute;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
