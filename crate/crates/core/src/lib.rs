//! Federated learning with neural additive models and conformal uncertainty.
//!
//! * [`numkit`]: dense matrices, deterministic RNG, softmax/cross-entropy, gradient checking.
//! * [`models`]: MLP backbone, neural additive model, Monte Carlo dropout.
//! * [`fedsim`]: client shards, local SGD, FedAvg rounds, descent audit.
//! * [`conformal`]: split conformal sets, dynamic level adjustment, class-wise uncertainty.
//! * [`interpret`]: top-fraction pixel masks, sensitivity maps, overlay images.
//! * [`dataio`]: MNIST IDX, CSV and synthetic datasets, IID partitioning.
//! * [`cli`]: run configuration, experiment pipeline, reports, benchmark.

pub mod cli;
pub mod conformal;
pub mod dataio;
pub mod error;
pub mod fedsim;
pub mod interpret;
pub mod models;
pub mod numkit;

pub use error::{Error, Result};
