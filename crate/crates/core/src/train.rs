//! Stochastic gradient ascent on the lower bounds.
//!
//! Training follows the reparameterized gradient with the ancestor score
//! dropped. With an alternating objective each iteration computes the θ
//! gradient from one (sampler, K) pair and the φ gradient from another, both
//! at the same parameter snapshot, and applies them together.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::elbo::{log_z_sample, ObjectiveKind};
use crate::error::{Error, Result};
use crate::grad::{grad_sample, GradientEstimator};
use crate::models::{ModelSpec, Setup};
use crate::oracle::kalman_filter_smoother;
use crate::params::{ParamMask, ParamVector};
use crate::particle::{sweep, Sampling, Scheme};
use crate::rng::{derive_seed, replicate_rng};
use crate::stats::SampleStats;

/// `params + lr * grad`.
pub fn sga_step(params: &ParamVector, grad: &ParamVector, lr: f64, step: usize) -> Result<ParamVector> {
    if !grad.all_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    params.add_scaled(grad, lr)
}

/// Update rule applied to the (masked, length-scaled) gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Optimizer {
    /// `p + lr * g`.
    Sga,
    /// Adam with bias correction, ascending.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn direction(&mut self, g: &[f64], step: usize, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
        let c1 = 1.0 - beta1.powi(step as i32);
        let c2 = 1.0 - beta2.powi(step as i32);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * gi;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * gi * gi;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps)
            })
            .collect()
    }
}

/// A sampler and its particle count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub k: usize,
}

impl Objective {
    pub fn new(kind: ObjectiveKind, k: usize) -> Self {
        Objective { kind, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TrainObjective {
    Single(Objective),
    /// θ follows `theta`, φ follows `phi`.
    Alternating { theta: Objective, phi: Objective },
}

/// Proposal-quality evaluation attached to a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    /// Reference model parameters (θ, usually the EM optimum) as `(theta1, theta2)`.
    pub theta_ref: (f64, f64),
    pub k_eval: usize,
    pub sampler: ObjectiveKind,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: TrainObjective,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub trainable: ParamMask,
    /// Record every `eval_every` steps (plus the initial state).
    pub eval_every: usize,
    /// Divide gradients by the sequence length, so `lr` applies to the
    /// per-step average ELBO.
    pub scale_by_length: bool,
    /// Replicates of the ELBO estimate recorded at each evaluation.
    pub elbo_reps: usize,
    pub quality: Option<QualityConfig>,
}

impl TrainConfig {
    pub fn new(objective: TrainObjective, lr: f64, steps: usize, seed: u64) -> Self {
        TrainConfig {
            objective,
            lr,
            steps,
            seed,
            optimizer: Optimizer::Sga,
            trainable: ParamMask::All,
            eval_every: 1,
            scale_by_length: true,
            elbo_reps: 1,
            quality: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidParameter("learning rate must be finite and non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParameter("eval_every must be at least 1".into()));
        }
        let ks = match self.objective {
            TrainObjective::Single(o) => vec![o.k],
            TrainObjective::Alternating { theta, phi } => vec![theta.k, phi.k],
        };
        if ks.contains(&0) {
            return Err(Error::InvalidParameter("particle counts must be at least 1".into()));
        }
        if self.elbo_reps == 0 {
            return Err(Error::InvalidParameter("elbo_reps must be at least 1".into()));
        }
        Ok(())
    }

    fn elbo_objective(&self) -> Objective {
        match self.objective {
            TrainObjective::Single(o) => o,
            TrainObjective::Alternating { theta, .. } => theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub params: Vec<f64>,
    pub elbo: f64,
    /// Exact `log p_θ(y)` when the model admits it.
    pub log_marginal: Option<f64>,
    pub proposal_quality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub names: Vec<String>,
    pub records: Vec<TrainRecord>,
    pub diverged: bool,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
    /// Seconds since the start of training at each record; kept apart from
    /// `records` so that the records are reproducible bit for bit.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

impl TrainTrace {
    pub fn last(&self) -> &TrainRecord {
        self.records.last().expect("the initial state is always recorded")
    }

    pub fn param(&self, record: &TrainRecord, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| record.params[i])
    }
}

/// Exact `log p_θ(y)` of a linear-Gaussian model.
pub fn exact_log_marginal(setup: &Setup, y: &[f64]) -> Result<f64> {
    Ok(kalman_filter_smoother(&setup.model.linear_gaussian(), y)?.log_marginal_likelihood)
}

fn masked_gradient(
    setup: &Setup,
    y: &[f64],
    objective: Objective,
    mask: ParamMask,
    trainable: ParamMask,
    scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = replicate_rng(seed, 0);
    let (g, _) = grad_sample(GradientEstimator::Reparam, objective.kind, setup, y, objective.k, &mut rng)?;
    Ok(setup
        .params()
        .entries()
        .iter()
        .zip(g)
        .map(|(p, gi)| {
            if mask.includes(p.group) && trainable.includes(p.group) {
                gi * scale
            } else {
                0.0
            }
        })
        .collect())
}

fn evaluate(setup: &Setup, y: &[f64], cfg: &TrainConfig, step: usize) -> Result<TrainRecord> {
    let o = cfg.elbo_objective();
    let seed = derive_seed(cfg.seed ^ 0x5EED_E7A1, step as u64);
    let mut elbo = 0.0;
    for r in 0..cfg.elbo_reps {
        elbo += log_z_sample(&setup.kernel(y), o.kind, o.k, &mut replicate_rng(seed, r as u64))?;
    }
    elbo /= cfg.elbo_reps as f64;
    let quality = match &cfg.quality {
        Some(q) => Some(proposal_quality_with(setup, y, q)?.mean),
        None => None,
    };
    Ok(TrainRecord {
        step,
        params: setup.params().values(),
        elbo,
        log_marginal: Some(exact_log_marginal(setup, y)?),
        proposal_quality: quality,
    })
}

/// Runs SGA from `init` on observations `y`.
///
/// The step-`s` gradient uses seed family `derive_seed(seed, s)`: stream 0
/// for the θ (or single) objective, `derive_seed(derive_seed(seed, s), 1)` for
/// the φ objective. Failures
/// after the initial evaluation truncate the trace and mark it diverged.
pub fn train(init: &Setup, y: &[f64], cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let start = Instant::now();
    let names: Vec<String> = init.params().names().map(String::from).collect();
    let scale = if cfg.scale_by_length { 1.0 / y.len() as f64 } else { 1.0 };
    let mut setup = *init;
    let mut params = setup.params();
    let mut adam = AdamState {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
    };
    let mut trace = TrainTrace {
        names,
        records: vec![evaluate(&setup, y, cfg, 0)?],
        diverged: false,
        failure: None,
        wall_clock: vec![start.elapsed().as_secs_f64()],
    };

    for step in 1..=cfg.steps {
        let seed = derive_seed(cfg.seed, step as u64);
        let mut next_adam = adam.clone();
        let outcome = (|| -> Result<(Setup, ParamVector, Option<TrainRecord>)> {
            let g = match cfg.objective {
                TrainObjective::Single(o) => {
                    masked_gradient(&setup, y, o, ParamMask::All, cfg.trainable, scale, seed)?
                }
                TrainObjective::Alternating { theta, phi } => {
                    let gt = masked_gradient(&setup, y, theta, ParamMask::Model, cfg.trainable, scale, seed)?;
                    let gp = masked_gradient(
                        &setup,
                        y,
                        phi,
                        ParamMask::Proposal,
                        cfg.trainable,
                        scale,
                        derive_seed(seed, 1),
                    )?;
                    gt.iter().zip(&gp).map(|(a, b)| a + b).collect()
                }
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { step });
            }
            let dir = match cfg.optimizer {
                Optimizer::Sga => g,
                Optimizer::Adam { beta1, beta2, eps } => next_adam.direction(&g, step, beta1, beta2, eps),
            };
            let next = sga_step(&params, &params.with_values(&dir)?, cfg.lr, step)?;
            if !next.all_finite() {
                return Err(Error::NonFinite("parameters"));
            }
            let next_setup = setup.with_params(&next)?;
            let rec = if step % cfg.eval_every == 0 {
                Some(evaluate(&next_setup, y, cfg, step)?)
            } else {
                None
            };
            Ok((next_setup, next, rec))
        })();
        match outcome {
            Ok((s, p, rec)) => {
                setup = s;
                params = p;
                adam = next_adam;
                if let Some(r) = rec {
                    trace.records.push(r);
                    trace.wall_clock.push(start.elapsed().as_secs_f64());
                }
            }
            Err(e) => {
                trace.diverged = true;
                trace.failure = Some(format!("step {step}: {e}"));
                break;
            }
        }
    }
    Ok(trace)
}

/// Mean over repetitions of `sqrt(Σ_t (μ_t^kalman - μ_t^approx)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mean: f64,
    pub stderr: f64,
    /// Repetitions that produced a metric.
    pub reps: usize,
    /// Repetitions whose sweep degenerated; excluded from `mean`.
    pub degenerate: usize,
}

/// Posterior-mean error of SMC or IS with the proposal of `setup` against the
/// Kalman smoother, both run under the model of `setup`.
///
/// Repetition `i` runs on stream `i` of `seed`.
pub fn proposal_quality(
    setup: &Setup,
    y: &[f64],
    k_eval: usize,
    sampler: ObjectiveKind,
    reps: usize,
    seed: u64,
) -> Result<QualityReport> {
    if !matches!(setup.model, ModelSpec::Lgssm(_)) {
        return Err(Error::InvalidParameter("proposal quality needs an LGSSM".into()));
    }
    if k_eval == 0 || reps == 0 {
        return Err(Error::InvalidParameter("k_eval and reps must be at least 1".into()));
    }
    let smoothed = kalman_filter_smoother(&setup.model.linear_gaussian(), y)?.smoothed_means;
    let kernel = setup.kernel(y);
    let scheme = match sampler {
        ObjectiveKind::Smc => Scheme::Smc,
        _ => Scheme::Is,
    };
    let mut metrics = Vec::with_capacity(reps);
    let mut degenerate = 0;
    for i in 0..reps {
        let mut rng = replicate_rng(seed, i as u64);
        let out = sweep(&kernel, sampler.particles(k_eval), scheme, Sampling::Reparameterized, true, &mut rng);
        let means = match out {
            Ok(o) => o.genealogy.expect("recorded").marginal_means(),
            Err(e) => Err(e),
        };
        match means {
            Ok(m) => metrics.push(posterior_mean_error(&smoothed, &m)),
            Err(Error::DegenerateAt { .. }) | Err(Error::DegenerateWeights) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    let s = SampleStats::from_slice(&metrics);
    Ok(QualityReport {
        mean: s.mean,
        stderr: if s.n > 1 { s.stderr() } else { 0.0 },
        reps: s.n,
        degenerate,
    })
}

fn proposal_quality_with(setup: &Setup, y: &[f64], q: &QualityConfig) -> Result<QualityReport> {
    let model = crate::models::LgssmParams::new(q.theta_ref.0, q.theta_ref.1)?;
    let at_ref = Setup {
        model: ModelSpec::Lgssm(model),
        ..*setup
    };
    proposal_quality(&at_ref, y, q.k_eval, q.sampler, q.reps, q.seed)
}

/// `sqrt(Σ_t (a_t - b_t)²)`.
pub fn posterior_mean_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// One cell of the train/test inference grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train: Objective,
    pub test: Objective,
    /// Mean over training runs of the per-run metric. With several runs the
    /// stderr is taken across runs, so it also covers training noise.
    pub quality: Option<QualityReport>,
    /// Training runs that diverged; excluded from `quality`.
    pub diverged: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub train: Vec<Objective>,
    pub test: Vec<Objective>,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_reps: usize,
    /// Independent training runs per training objective.
    pub train_runs: usize,
}

/// Trains φ alone for every training objective (θ held at `setup`'s model)
/// and evaluates the learned proposal under every test objective.
///
/// Run `r` of training objective `i` uses seed `derive_seed(seed, i * 1000 + r)`;
/// test objective `j` is always evaluated on the same streams.
pub fn infer_eval_grid(setup: &Setup, y: &[f64], cfg: &GridConfig) -> Result<Vec<GridCell>> {
    if cfg.train_runs == 0 {
        return Err(Error::InvalidParameter("train_runs must be at least 1".into()));
    }
    let mut cells = Vec::with_capacity(cfg.train.len() * cfg.test.len());
    for (i, &train_obj) in cfg.train.iter().enumerate() {
        let mut learned = Vec::with_capacity(cfg.train_runs);
        let mut diverged = 0;
        let mut failure = None;
        for r in 0..cfg.train_runs {
            let seed = derive_seed(cfg.seed, (i * 1000 + r) as u64);
            let mut tc = TrainConfig::new(TrainObjective::Single(train_obj), cfg.lr, cfg.steps, seed);
            tc.trainable = ParamMask::Proposal;
            tc.optimizer = cfg.optimizer;
            tc.eval_every = cfg.steps.max(1);
            let trace = train(setup, y, &tc)?;
            if trace.diverged {
                diverged += 1;
                failure = failure.or(trace.failure.clone());
            } else {
                learned.push(setup.with_params(&setup.params().with_values(&trace.last().params)?)?);
            }
        }
        for (j, &test_obj) in cfg.test.iter().enumerate() {
            let eval_seed = derive_seed(cfg.seed ^ 0xE7A1, j as u64);
            let mut reports = Vec::with_capacity(learned.len());
            for s in &learned {
                reports.push(proposal_quality(s, y, test_obj.k, test_obj.kind, cfg.eval_reps, eval_seed)?);
            }
            cells.push(GridCell {
                train: train_obj,
                test: test_obj,
                quality: pool_runs(&reports),
                diverged,
                failure: failure.clone(),
            });
        }
    }
    Ok(cells)
}

fn pool_runs(reports: &[QualityReport]) -> Option<QualityReport> {
    match reports {
        [] => None,
        [one] => Some(*one),
        many => {
            let means: Vec<f64> = many.iter().map(|r| r.mean).collect();
            let s = SampleStats::from_slice(&means);
            Some(QualityReport {
                mean: s.mean,
                stderr: s.stderr(),
                reps: many.iter().map(|r| r.reps).sum(),
                degenerate: many.iter().map(|r| r.degenerate).sum(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AffineProposalParams, LgssmParams, ProposalSpec};
    use crate::params::ParamGroup;
    use approx::assert_relative_eq;

    fn pv(v: &[f64]) -> ParamVector {
        let names = ["a", "b", "c"];
        let items: Vec<_> = v.iter().enumerate().map(|(i, x)| (names[i], ParamGroup::Model, *x)).collect();
        ParamVector::from_triples(&items).unwrap()
    }

    #[test]
    fn sga_examples() {
        let p = pv(&[0.5, -1.0]);
        assert_eq!(sga_step(&p, &p.zeros_like(), 0.1, 1).unwrap(), p);
        assert_eq!(sga_step(&pv(&[0.0]), &pv(&[2.0]), 1.0, 1).unwrap().values(), vec![2.0]);
        let g = pv(&[0.3, 0.7]);
        let half = sga_step(&sga_step(&p, &g, 0.05, 1).unwrap(), &g, 0.05, 2).unwrap();
        let full = sga_step(&p, &g, 0.1, 1).unwrap();
        for (a, b) in half.values().iter().zip(full.values()) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        let bad = p.with_values(&[f64::NAN, 0.0]).unwrap();
        assert_eq!(sga_step(&p, &bad, 0.1, 7), Err(Error::NonFiniteGradient { step: 7 }));
    }

    fn lgssm_data() -> Vec<f64> {
        crate::models::lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), 30, 2).unwrap().1
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let y = lgssm_data();
        let setup = Setup::new(
            ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()),
            ProposalSpec::Bootstrap,
        );
        let cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Smc, 5)), 0.0, 10, 1);
        let t = train(&setup, &y, &cfg).unwrap();
        assert_eq!(t.records.len(), 11);
        for r in &t.records {
            assert_eq!(r.params, t.records[0].params);
        }
    }

    #[test]
    fn training_is_deterministic_and_cadenced() {
        let y = lgssm_data();
        let setup = Setup::new(
            ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()),
            ProposalSpec::Bootstrap,
        )
        .detached(true);
        let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Smc, 8)), 0.01, 20, 4);
        cfg.eval_every = 5;
        let a = train(&setup, &y, &cfg).unwrap();
        let b = train(&setup, &y, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 5);
        assert_eq!(a.records[4].step, 20);
    }

    #[test]
    fn mask_freezes_model() {
        let y = lgssm_data();
        let setup = Setup::new(
            ModelSpec::Lgssm(LgssmParams::new(0.5, 0.5).unwrap()),
            ProposalSpec::Affine(AffineProposalParams::bootstrap_like(0.5)),
        );
        let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Is, 4)), 0.01, 5, 4);
        cfg.trainable = ParamMask::Proposal;
        let t = train(&setup, &y, &cfg).unwrap();
        let last = t.last();
        assert_eq!(&last.params[..2], &[0.5, 0.5]);
        assert_ne!(&last.params[2..], &t.records[0].params[2..]);
    }

    #[test]
    fn divergence_truncates_trace() {
        let y = lgssm_data();
        let setup = Setup::new(
            ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()),
            ProposalSpec::Bootstrap,
        );
        let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Smc, 4)), 1e6, 50, 4);
        cfg.scale_by_length = false;
        let t = train(&setup, &y, &cfg).unwrap();
        assert!(t.diverged);
        assert!(t.failure.is_some());
        assert!(t.records.iter().all(|r| r.params.iter().all(|p| p.is_finite())));
    }

    #[test]
    fn perfect_means_give_zero_error() {
        let m = [0.1, -0.3, 2.0];
        assert_eq!(posterior_mean_error(&m, &m), 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let o = TrainObjective::Single(Objective::new(ObjectiveKind::Smc, 4));
        assert!(TrainConfig::new(o, -1.0, 5, 0).validate().is_err());
        assert!(TrainConfig::new(o, 0.1, 0, 0).validate().is_err());
        assert!(TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Is, 0)), 0.1, 5, 0)
            .validate()
            .is_err());
    }
}
