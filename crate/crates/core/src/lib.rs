//! Latent-space maps of image collections.
//!
//! A convolutional variational autoencoder with encoding normalization
//! compresses images into per-example normal distributions; an exact tSNE
//! whose input similarities weight each latent feature by the encoded
//! uncertainties then lays those distributions out in two dimensions. A PCA
//! baseline, array-file I/O, a synthetic image generator, and SVG/CSV output
//! round out the pipeline.

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pca;
pub mod pipeline;
pub mod registry;
pub mod tensor;
pub mod tsne;
pub mod vae;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
