//! Unsupervised global VAE: a Gaussian-mixture local latent space whose
//! components are modulated by a group-level global latent variable `β`.
//!
//! The crate covers the full pipeline: closed-form numerics, a small
//! reverse-mode autodiff tape, the network bundle, generative and inference
//! models, the ELBO with analytic marginalisation over the discrete
//! component, training with checkpoints, data loaders and the evaluation
//! protocols (interpolation grids, domain interpolation, batch embeddings
//! and a linear probe).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod generative;
pub mod inference;
pub mod nets;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;

pub mod cli;

pub use error::{Error, Result};
