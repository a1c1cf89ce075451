use seqelbo::elbo::ObjectiveKind;
use seqelbo::models::{lgssm_simulate, LinearGaussianSsm};
use seqelbo::oracle::{em_fit, lgssm_log_marginal, EM_DEFAULT_MAX_ITERS, EM_DEFAULT_TOL};
use seqelbo::train::{
    infer_eval_grid, proposal_quality, train, GridConfig, Objective, Optimizer, QualityConfig, TrainConfig,
    TrainObjective,
};
use seqelbo::{AffineProposalParams, LgssmParams, ModelSpec, ParamMask, ProposalSpec, Setup};

fn data(len: usize, seed: u64) -> Vec<f64> {
    lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), len, seed).unwrap().1
}

fn theta_init() -> Setup {
    Setup::new(ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()), ProposalSpec::Bootstrap).detached(true)
}

#[test]
fn identical_configs_give_identical_traces() {
    let y = data(40, 3);
    let mut cfg = TrainConfig::new(
        TrainObjective::Alternating {
            theta: Objective::new(ObjectiveKind::Smc, 20),
            phi: Objective::new(ObjectiveKind::Is, 5),
        },
        0.01,
        15,
        77,
    );
    cfg.eval_every = 5;
    let setup = Setup::new(
        ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()),
        ProposalSpec::Affine(AffineProposalParams::bootstrap_like(0.1)),
    );
    let a = train(&setup, &y, &cfg).unwrap();
    let b = train(&setup, &y, &cfg).unwrap();
    let bits = |t: &seqelbo::train::TrainTrace| -> Vec<u64> {
        t.records
            .iter()
            .flat_map(|r| {
                let mut v: Vec<u64> = r.params.iter().map(|x| x.to_bits()).collect();
                v.push(r.elbo.to_bits());
                v.push(r.log_marginal.unwrap().to_bits());
                v
            })
            .collect()
    };
    assert_eq!(a.records, b.records);
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.records.len(), 15 / 5 + 1);
    cfg.seed = 78;
    let c = train(&setup, &y, &cfg).unwrap();
    assert_ne!(a.last().params, c.last().params);
}

#[test]
fn smc_theta_training_improves_exact_likelihood() {
    let y = data(200, 100);
    let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Smc, 100)), 0.01, 100, 1);
    cfg.trainable = ParamMask::Model;
    cfg.eval_every = 100;
    let trace = train(&theta_init(), &y, &cfg).unwrap();
    assert!(!trace.diverged);
    let first = trace.records[0].log_marginal.unwrap();
    let last = trace.last().log_marginal.unwrap();
    assert!(last > first, "{first} -> {last}");
    let p = LgssmParams::new(trace.last().params[0], trace.last().params[1]).unwrap();
    assert_eq!(lgssm_log_marginal(p, &y).unwrap(), last);
}

#[test]
fn recorded_values_are_finite() {
    let y = data(50, 2);
    let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Is, 10)), 0.01, 20, 4);
    cfg.quality = Some(QualityConfig {
        theta_ref: (0.9, 1.0),
        k_eval: 10,
        sampler: ObjectiveKind::Smc,
        reps: 3,
        seed: 1,
    });
    let trace = train(&theta_init(), &y, &cfg).unwrap();
    assert_eq!(trace.records.len(), 21);
    assert_eq!(trace.wall_clock.len(), trace.records.len());
    for r in &trace.records {
        assert!(r.params.iter().all(|p| p.is_finite()));
        assert!(r.elbo.is_finite());
        assert!(r.log_marginal.unwrap().is_finite());
        assert!(r.proposal_quality.unwrap().is_finite());
    }
}

#[test]
fn optimal_proposal_is_no_worse_than_bootstrap() {
    let y = data(50, 5);
    let p = LgssmParams::new(0.9, 1.0).unwrap();
    let boot = Setup::new(ModelSpec::Lgssm(p), ProposalSpec::Bootstrap);
    let opt = Setup::new(
        ModelSpec::Lgssm(p),
        ProposalSpec::Affine(AffineProposalParams::locally_optimal(&LinearGaussianSsm::lgssm(p))),
    );
    let mut prev: Option<(f64, f64)> = None;
    for k_eval in [10, 1000] {
        let b = proposal_quality(&boot, &y, k_eval, ObjectiveKind::Smc, 30, 6).unwrap();
        let o = proposal_quality(&opt, &y, k_eval, ObjectiveKind::Smc, 30, 6).unwrap();
        assert_eq!(b.degenerate + o.degenerate, 0);
        let se = (b.stderr.powi(2) + o.stderr.powi(2)).sqrt();
        assert!(o.mean <= b.mean + 3.0 * se, "K={k_eval}: optimal {} bootstrap {}", o.mean, b.mean);
        // More particles bring both closer to the smoother.
        if let Some((pb, po)) = prev {
            assert!(b.mean < pb && o.mean < po);
        }
        prev = Some((b.mean, o.mean));
    }
}

#[test]
fn quality_needs_a_linear_gaussian_model() {
    let s = Setup::unknown_mean(0.0, 0.0);
    assert!(proposal_quality(&s, &[1.0], 10, ObjectiveKind::Smc, 2, 0).is_err());
}

#[test]
fn grid_reports_every_cell() {
    let y = data(30, 7);
    let em = em_fit(&y, LgssmParams::new(0.1, 0.1).unwrap(), EM_DEFAULT_MAX_ITERS, EM_DEFAULT_TOL).unwrap();
    let setup = Setup::new(
        ModelSpec::Lgssm(em.theta_hat),
        ProposalSpec::Affine(AffineProposalParams::bootstrap_like(em.theta_hat.theta1)),
    );
    let objs = vec![Objective::new(ObjectiveKind::Is, 4), Objective::new(ObjectiveKind::Smc, 4)];
    let cfg = GridConfig {
        train: objs.clone(),
        test: objs,
        optimizer: Optimizer::adam(),
        lr: 0.01,
        steps: 5,
        seed: 1,
        eval_reps: 3,
        train_runs: 2,
    };
    let cells = infer_eval_grid(&setup, &y, &cfg).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        let q = c.quality.unwrap();
        assert_eq!(c.diverged, 0);
        assert_eq!(q.reps, 6);
        assert!(q.mean.is_finite() && q.stderr >= 0.0);
    }
    assert_eq!(cells, infer_eval_grid(&setup, &y, &cfg).unwrap());
}
