//! Layer-wise linear probing of image-token representations in a toy
//! multimodal decoder, with attention masks, knockout and synthetic data.

pub mod binio;
pub mod commands;
pub mod config;
pub mod error;
pub mod knockout;
pub mod mask;
pub mod model;
pub mod probe;
pub mod segmap;
pub mod stage;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
