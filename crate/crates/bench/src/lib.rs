//! Shared fixtures for the benchmarks.

use seqelbo::models::lgssm_simulate;
use seqelbo::{AffineProposalParams, LgssmParams, ModelSpec, ProposalSpec, Setup};

/// Observations from the reference model `θ = (0.9, 1.0)`.
pub fn observations(len: usize) -> Vec<f64> {
    lgssm_simulate(LgssmParams::new(0.9, 1.0).expect("valid"), len, 100)
        .expect("simulate")
        .1
}

pub fn bootstrap() -> Setup {
    Setup::new(ModelSpec::Lgssm(LgssmParams::new(0.9, 1.0).expect("valid")), ProposalSpec::Bootstrap)
}

pub fn affine() -> Setup {
    Setup::new(
        ModelSpec::Lgssm(LgssmParams::new(0.9, 1.0).expect("valid")),
        ProposalSpec::Affine(AffineProposalParams::bootstrap_like(0.9)),
    )
}
