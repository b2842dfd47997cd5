pub mod cli;
pub mod config;
pub mod corpus;
pub mod eegprep;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod ssl;
pub mod synth;
pub mod textseg;
pub mod trainer;

pub use error::{Error, Result};
