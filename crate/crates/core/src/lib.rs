//! Deciphering autoencoders: every training image is keyed by a fixed, unique
//! channel-dropout pattern, an encoder-decoder learns to reconstruct the image
//! from that pattern alone, and fresh patterns decode into new images.

pub(crate) mod bin;
pub mod clustering;
pub mod codebook;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, ErrorFamily, Result};
