//! Sequential Monte Carlo evidence lower bounds.
//!
//! Importance sampling and SMC estimators of the marginal likelihood, the
//! VAE/IS/SMC lower bounds built from them, their gradient estimators, SGA
//! training loops, and exact oracles (Kalman, EM, conjugate posteriors,
//! extended-space enumeration on discrete HMMs) for checking all of it.

pub mod elbo;
pub mod error;
pub mod grad;
pub mod models;
pub mod oracle;
pub mod params;
pub mod particle;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use models::{
    AffineProposalParams, DiscreteHmmSpec, DiscreteProposal, Gaussian1D, LgssmParams, ModelSpec,
    ProposalSpec, Setup, UnknownMeanProposalParams,
};
pub use params::{Param, ParamGroup, ParamMask, ParamVector};
pub use particle::{IsBatch, ParticleGenealogy};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
