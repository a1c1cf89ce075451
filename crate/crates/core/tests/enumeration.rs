use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqelbo::elbo::{elbo_estimate_with, enumerate_kl_gap_is, enumerate_kl_gap_smc, log_z_samples, ObjectiveKind};
use seqelbo::models::{DiscreteKernel, IntermediateTargets};
use seqelbo::oracle::{hmm_forward, hmm_posterior_proposal};
use seqelbo::{DiscreteHmmSpec, DiscreteProposal};

fn random_instance(rng: &mut ChaCha8Rng) -> (DiscreteHmmSpec, DiscreteProposal, Vec<f64>) {
    let states = rng.random_range(1..=3);
    let symbols = rng.random_range(2..=3);
    let spec = DiscreteHmmSpec::random(states, symbols, 2, rng).unwrap();
    let proposal = DiscreteProposal::random(states, 2, rng);
    let obs = (0..2).map(|_| rng.random_range(0..symbols) as f64).collect();
    (spec, proposal, obs)
}

#[test]
fn claim_one_holds_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..50 {
        let (spec, q, obs) = random_instance(&mut rng);
        let is = enumerate_kl_gap_is(&spec, &q, &obs, 2).unwrap();
        let smc = enumerate_kl_gap_smc(&spec, &q, &obs, 2, IntermediateTargets::Filtering).unwrap();
        for (name, r) in [("is", &is), ("smc", &smc)] {
            assert!(r.residual.abs() <= 1e-10, "instance {i} {name}: residual {}", r.residual);
            assert!(r.kl_exact >= -1e-12, "instance {i} {name}: kl {}", r.kl_exact);
            assert!(r.elbo_exact <= r.log_z_exact + 1e-12);
            assert!((r.target_mass - 1.0).abs() < 1e-12, "instance {i} {name}: mass {}", r.target_mass);
        }
    }
}

#[test]
fn smc_bound_is_below_log_z_with_more_particles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let spec = DiscreteHmmSpec::random(2, 2, 3, &mut rng).unwrap();
        let q = DiscreteProposal::random(2, 3, &mut rng);
        let obs = [0.0, 1.0, 1.0];
        let r = enumerate_kl_gap_smc(&spec, &q, &obs, 3, IntermediateTargets::Filtering).unwrap();
        assert!(r.elbo_exact <= r.log_z_exact);
        assert!(r.residual.abs() <= 1e-10);
    }
}

#[test]
fn monte_carlo_elbo_converges_to_enumerated_value() {
    let spec = DiscreteHmmSpec::new(
        vec![0.5, 0.3, 0.2],
        vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.3, 0.3, 0.4]],
        vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.5, 0.5]],
        2,
    )
    .unwrap();
    let q = DiscreteProposal::bootstrap(&spec);
    let obs = [1.0, 0.0];
    let kernel = DiscreteKernel::new(&spec, &q, &obs, IntermediateTargets::Filtering).unwrap();
    let cases = [
        (ObjectiveKind::Is, enumerate_kl_gap_is(&spec, &q, &obs, 2).unwrap()),
        (
            ObjectiveKind::Smc,
            enumerate_kl_gap_smc(&spec, &q, &obs, 2, IntermediateTargets::Filtering).unwrap(),
        ),
    ];
    for (kind, exact) in cases {
        let mc = elbo_estimate_with(&kernel, kind, 2, 100_000, 99).unwrap();
        assert!(
            (mc.mean - exact.elbo_exact).abs() <= 3.0 * mc.stderr,
            "{kind}: MC {} ± {} vs exact {}",
            mc.mean,
            mc.stderr,
            exact.elbo_exact
        );
    }
}

#[test]
fn exact_posterior_proposal_closes_the_is_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let spec = DiscreteHmmSpec::random(3, 2, 2, &mut rng).unwrap();
        let obs = [1.0, 0.0];
        let post = hmm_posterior_proposal(&spec, &obs).unwrap();
        for k in [1, 2, 3] {
            let r = enumerate_kl_gap_is(&spec, &post, &obs, k).unwrap();
            assert!(r.kl_exact.abs() < 1e-12, "K={k}: {}", r.kl_exact);
            assert!((r.elbo_exact - r.log_z_exact).abs() < 1e-12);
        }
        let off = enumerate_kl_gap_is(&spec, &post.perturbed(0.2), &obs, 2).unwrap();
        assert!(off.kl_exact > 0.0);
    }
}

#[test]
fn constant_emissions_make_smc_exact() {
    let spec = DiscreteHmmSpec::new(
        vec![0.4, 0.6],
        vec![vec![0.9, 0.1], vec![0.35, 0.65]],
        vec![vec![0.3, 0.7], vec![0.3, 0.7]],
        3,
    )
    .unwrap();
    let obs = [1.0, 0.0, 1.0];
    let exact = hmm_forward(&spec, &obs).unwrap().log_marginal;
    assert!((exact - (0.7f64 * 0.3 * 0.7).ln()).abs() < 1e-12);
    let q = DiscreteProposal::bootstrap(&spec);
    let r = enumerate_kl_gap_smc(&spec, &q, &obs, 2, IntermediateTargets::Filtering).unwrap();
    assert!(r.kl_exact.abs() < 1e-12);
    let kernel = DiscreteKernel::new(&spec, &q, &obs, IntermediateTargets::Filtering).unwrap();
    let lz = log_z_samples(&kernel, ObjectiveKind::Smc, 2, 100, 3).unwrap();
    assert!(lz.iter().all(|l| (l - exact).abs() < 1e-12));
}

#[test]
fn posterior_steps_need_marginal_targets() {
    let spec = DiscreteHmmSpec::new(
        vec![0.5, 0.5],
        vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        2,
    )
    .unwrap();
    let obs = [0.0, 1.0];
    let post = hmm_posterior_proposal(&spec, &obs).unwrap();
    let filtering = enumerate_kl_gap_smc(&spec, &post, &obs, 2, IntermediateTargets::Filtering).unwrap();
    let smoothing = enumerate_kl_gap_smc(&spec, &post, &obs, 2, IntermediateTargets::Smoothing).unwrap();
    assert!(filtering.kl_exact > 1e-6, "{}", filtering.kl_exact);
    assert!(smoothing.kl_exact.abs() < 1e-12, "{}", smoothing.kl_exact);
}

#[test]
fn single_particle_smc_enumeration_equals_is() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (spec, q, obs) = random_instance(&mut rng);
        let a = enumerate_kl_gap_is(&spec, &q, &obs, 1).unwrap();
        let b = enumerate_kl_gap_smc(&spec, &q, &obs, 1, IntermediateTargets::Filtering).unwrap();
        assert!((a.elbo_exact - b.elbo_exact).abs() < 1e-12);
        assert!((a.kl_exact - b.kl_exact).abs() < 1e-12);
    }
}
