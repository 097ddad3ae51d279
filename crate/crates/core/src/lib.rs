pub mod backbone;
pub mod cleaner;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod nn;
pub mod synth;
pub mod verifier;

pub use error::{Error, Result};
