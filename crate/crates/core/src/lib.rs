//! G-SimCLR: denoising-autoencoder pseudo-labels guide mini-batch
//! construction for NT-Xent contrastive training.

pub mod cluster;
pub mod config;
pub mod contrastive;
pub mod dae;
pub mod data;
mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod scheduler;
pub mod seed;

pub use error::{Error, Result};
