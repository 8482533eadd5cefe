pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod physical;
pub mod rope;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
