//! Compressed-domain vision: a scale-hyperprior image codec whose streams
//! decode straight to latents, a bottleneck-ResNet classifier over those
//! latents, and the training loops and command-line tooling around them.
//!
//! The main entry points are [`codec::Codec`] (transforms, rate model,
//! [`compress`](codec::Codec::compress)), [`entropy::partial_decode`],
//! [`classifier::Classifier`] and the loops in [`train`].

pub mod classifier;
pub mod codec;
pub mod entropy;
pub mod pipeline;
pub mod report;
pub mod train;

pub use latentvision_nn as nn;

use entropy::StreamError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{0}")]
    Runtime(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Nn(#[from] latentvision_nn::NnError),
}

impl Error {
    /// Whether the failure stems from bad user input (paths, config values,
    /// incompatible artifacts) rather than from the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dataset(_))
    }
}
