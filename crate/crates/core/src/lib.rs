pub mod activations;
pub mod blocks;
pub mod config;
pub mod data;
pub mod deform;
pub mod discriminator;
pub mod dsp;
pub mod error;
pub mod generator;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
