//! Latent Gaussian spatial extreme-value models for annual rainfall maxima
//! from several sources.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod gev;
pub mod gp;
pub mod ingest;
pub mod linalg;
pub mod map;
pub mod mcem;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod spatial;
pub mod synthetic;
pub mod uncertainty;

pub use error::{Error, Result};
