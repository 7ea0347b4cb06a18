//! Few-shot abnormal trace classification for microservice systems.
//!
//! The pipeline turns each trace (a span tree plus its logs) into a span
//! feature matrix and a log feature matrix, fuses them with a multi-head
//! attention autoencoder into one latent vector per trace, and classifies
//! latent traces into fault categories with a transformer-encoder
//! meta-learner trained by first-order MAML on N-way K-shot episodes.

pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod autograd;
pub mod embed;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod fusion_ae;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod te_maml;
pub mod trace_model;

pub use autograd::Matrix;
pub use error::{Error, Result};
pub use params::ParamSet;
