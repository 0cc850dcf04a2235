//! Latent kernel feature selection.
//!
//! An autoencoder compresses a sample-by-feature matrix into a low-dimensional
//! latent space; a Gaussian kernel over the latent codes becomes the target,
//! and a greedy multiple-kernel learner picks the feature-wise kernels whose
//! combination best aligns with it. The chosen features are then judged by
//! their redundancy and by how well k-means on them recovers known classes,
//! alongside Sparse K-Means and spectral feature selection baselines.

pub mod autoencoder;
pub mod baselines;
pub mod clustering;
pub mod dataio;
mod error;
pub mod evaluation;
pub mod kernel;
pub mod linalg;
pub mod mkl;
pub mod pipeline;
pub mod seed;

pub use error::{Error, ErrorKind, Result};
