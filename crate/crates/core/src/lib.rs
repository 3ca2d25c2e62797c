pub mod cli;
pub mod config;
pub mod e2e;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod interaction;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod opsearch;
pub mod phantom;
pub mod pseudo;
pub mod rabc;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::{FlipMode, Padding, Real, Tensor};
