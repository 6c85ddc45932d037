//! Multitask multimodal transformer for small medical-imaging benchmarks.
//!
//! The crate is CPU-only and self-contained: a reverse-mode autodiff tensor
//! core ([`tensor`]), patch tokenization for 2-D images and 3-D volumes
//! ([`tokenizer`]), learned latent vocabularies that condition a shared
//! trunk on dimensionality / modality / body part / task ([`latents`],
//! [`attention`], [`model`]), self-supervised objectives ([`ssl`]),
//! summed-input augmentation with a cascading schedule ([`augment`]),
//! optimizers, metrics, checkpointing and the training loops ([`train`]),
//! synthetic and archive-backed datasets ([`data`]), and a command-line
//! front end ([`cli`]).

pub mod attention;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod latents;
pub mod model;
pub mod ssl;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use tensor::{no_grad, Dtype, GradTape, Scalar, Tensor, TensorError};

/// Umbrella error for the crate's fallible surface.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Latents(#[from] latents::LatentsError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Ssl(#[from] ssl::SslError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
