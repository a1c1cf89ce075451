use seqelbo::elbo::ObjectiveKind;
use seqelbo::grad::{fd_elbo_stats, gradient_samples, gradient_stats, GradientEstimator, FD_STEP};
use seqelbo::models::lgssm_simulate;
use seqelbo::params::ParamMask;
use seqelbo::stats::{variance_ratio_p_value, z_score, SampleStats, THREE_SIGMA_P};
use seqelbo::{AffineProposalParams, LgssmParams, ModelSpec, ProposalSpec, Setup};

fn short_data(len: usize) -> Vec<f64> {
    let (_, y) = lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), 200, 1).unwrap();
    y[..len].to_vec()
}

fn lgssm(proposal: ProposalSpec) -> Setup {
    Setup::new(ModelSpec::Lgssm(LgssmParams::new(0.9, 1.0).unwrap()), proposal)
}

#[test]
fn vae_gradient_matches_finite_differences() {
    let setup = Setup::unknown_mean(0.4, -0.3);
    let y = [2.3];
    let fd = fd_elbo_stats(ObjectiveKind::Is, &setup, &y, 1, ParamMask::All, 1_000_000, 8, FD_STEP).unwrap();
    let g = gradient_stats(
        GradientEstimator::Reparam,
        ObjectiveKind::Is,
        &setup,
        &y,
        1,
        ParamMask::All,
        1_000_000,
        9,
        false,
    )
    .unwrap();
    for c in 0..2 {
        let z = z_score(g.mean[c], g.stderr(c), fd.mean[c], fd.stderr(c));
        assert!(z.abs() <= 3.0, "{}: z = {z}", g.names[c]);
    }
}

#[test]
fn unbiased_estimators_match_finite_differences() {
    let y = short_data(2);
    let affine = AffineProposalParams {
        a: 0.5,
        b: 0.3,
        c: 0.1,
        log_var: -0.5,
        b1: 0.2,
        c1: 0.0,
        log_var1: 0.0,
    };
    let setup = lgssm(ProposalSpec::Affine(affine));
    let n = 200_000;
    let fd = fd_elbo_stats(ObjectiveKind::Smc, &setup, &y, 3, ParamMask::All, n, 21, FD_STEP).unwrap();
    for e in [GradientEstimator::ReinforceReparam, GradientEstimator::ReinforceFull] {
        let g = gradient_stats(e, ObjectiveKind::Smc, &setup, &y, 3, ParamMask::All, n, 22, false).unwrap();
        for c in 0..g.names.len() {
            let z = z_score(g.mean[c], g.stderr(c), fd.mean[c], fd.stderr(c));
            assert!(z.abs() <= 3.0, "{e} {}: z = {z}", g.names[c]);
        }
    }
}

/// Mean of `reparam - reinforce_reparam` on shared streams, i.e. minus the
/// expected ancestor-score term, for the two model parameters.
fn reparam_bias(seed: u64) -> [SampleStats; 2] {
    let y = short_data(3);
    let setup = lgssm(ProposalSpec::Bootstrap);
    let n = 200_000;
    let a = gradient_samples(GradientEstimator::Reparam, ObjectiveKind::Smc, &setup, &y, 4, ParamMask::Model, n, seed)
        .unwrap();
    let b = gradient_samples(
        GradientEstimator::ReinforceReparam,
        ObjectiveKind::Smc,
        &setup,
        &y,
        4,
        ParamMask::Model,
        n,
        seed,
    )
    .unwrap();
    [0, 1].map(|c| {
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, z)| x[c] - z[c]).collect();
        SampleStats::from_slice(&d)
    })
}

#[test]
fn reparam_bias_is_stable_across_seeds() {
    // Measured at 2·10⁵ samples: θ2 bias ≈ -0.55, θ1 bias ≈ -0.17.
    const LOCKED: [f64; 2] = [-0.17, -0.55];
    let first = reparam_bias(1);
    let second = reparam_bias(2);
    for c in 0..2 {
        let (a, b) = (&first[c], &second[c]);
        let z = z_score(a.mean, a.stderr(), b.mean, b.stderr());
        assert!(z.abs() <= 3.0, "component {c}: {} vs {}", a.mean, b.mean);
        for s in [a, b] {
            assert!((s.mean - LOCKED[c]).abs() <= 3.0 * s.stderr(), "component {c}: {} vs {}", s.mean, LOCKED[c]);
        }
    }
    // The θ2 bias is clearly present.
    assert!(first[1].mean < -3.0 * first[1].stderr());
}

#[test]
fn variance_grows_with_each_score_term() {
    let (_, y) = lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), 200, 1).unwrap();
    let setup = Setup::new(ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()), ProposalSpec::Bootstrap);
    let stats: Vec<_> = GradientEstimator::ALL
        .iter()
        .map(|&e| {
            gradient_stats(e, ObjectiveKind::Smc, &setup, &y, 16, ParamMask::Model, 100, 5, false)
                .unwrap()
                .component(0)
        })
        .collect();
    let (reparam, rr, full) = (&stats[0], &stats[1], &stats[2]);
    let p = variance_ratio_p_value(rr, reparam).unwrap();
    assert!(rr.std() > reparam.std() && p < THREE_SIGMA_P, "rr vs reparam p = {p}");
    let p = variance_ratio_p_value(full, rr).unwrap();
    assert!(full.std() > rr.std() && p < THREE_SIGMA_P, "full vs rr p = {p}");
}

#[test]
fn stderr_halves_with_four_times_the_samples() {
    let y = short_data(3);
    let setup = lgssm(ProposalSpec::Bootstrap);
    let se = |n: usize| {
        gradient_stats(GradientEstimator::Reparam, ObjectiveKind::Smc, &setup, &y, 4, ParamMask::All, n, 30, false)
            .unwrap()
            .stderr(0)
    };
    let ratio = se(4_000) / se(16_000);
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
}

#[test]
fn detached_bootstrap_blocks_theta_through_proposal() {
    // With a single step the bootstrap proposal is θ-free, so detaching is a no-op.
    let y = short_data(1);
    let setup = lgssm(ProposalSpec::Bootstrap);
    let a = gradient_samples(GradientEstimator::Reparam, ObjectiveKind::Smc, &setup, &y, 3, ParamMask::All, 50, 4).unwrap();
    let b = gradient_samples(
        GradientEstimator::Reparam,
        ObjectiveKind::Smc,
        &setup.detached(true),
        &y,
        3,
        ParamMask::All,
        50,
        4,
    )
    .unwrap();
    assert_eq!(a, b);
    // Over several steps the θ1 gradient changes once the path through q is cut.
    let y = short_data(3);
    let a = gradient_samples(GradientEstimator::Reparam, ObjectiveKind::Smc, &setup, &y, 3, ParamMask::All, 5, 4).unwrap();
    let b = gradient_samples(
        GradientEstimator::Reparam,
        ObjectiveKind::Smc,
        &setup.detached(true),
        &y,
        3,
        ParamMask::All,
        5,
        4,
    )
    .unwrap();
    assert!(a.iter().zip(&b).any(|(x, z)| x[0] != z[0]));
}
