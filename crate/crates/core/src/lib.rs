pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
