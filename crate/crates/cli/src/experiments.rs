//! Experiment dispatch. Each experiment returns its data files as bytes plus
//! the pass/fail checks it is configured with; writing them is left to the
//! runner so that digests and the manifest come from one place.

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

use seqelbo::elbo::{enumerate_kl_gap_is, enumerate_kl_gap_smc, log_z_samples, KlGapReport, ObjectiveKind};
use seqelbo::grad::{gradient_stats, snr_profile, GradStats, GradientEstimator};
use seqelbo::models::{lgssm_simulate, IntermediateTargets, LinearGaussianSsm};
use seqelbo::oracle::{em_fit, lgssm_log_marginal, EmResult, EM_DEFAULT_MAX_ITERS, EM_DEFAULT_TOL};
use seqelbo::rng::{derive_seed, replicate_rng};
use seqelbo::stats::{ols_slope, snr_stderr, variance_ratio_p_value, SampleStats, THREE_SIGMA_P};
use seqelbo::train::{
    infer_eval_grid, train, GridCell, GridConfig, Objective, Optimizer, QualityConfig, TrainConfig,
    TrainObjective, TrainRecord, TrainTrace,
};
use seqelbo::{
    AffineProposalParams, DiscreteHmmSpec, DiscreteProposal, LgssmParams, ModelSpec, ParamMask, ProposalSpec, Setup,
};

use crate::config::{Experiment, ExperimentConfig, Resolved};
use crate::csvio::{col, opt, render_csv, Cell, Column, ColumnType::*};

/// Every fit of the reference θ starts here.
pub const EM_INIT: (f64, f64) = (0.1, 0.1);

/// A named pass/fail threshold evaluated inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
}

impl Outcome {
    fn csv(&mut self, name: impl Into<String>, schema: &[Column], rows: &[Vec<Cell>]) -> Result<()> {
        let name = name.into();
        let bytes = render_csv(schema, rows).with_context(|| format!("rendering {name}"))?;
        self.artifacts.push(Artifact { name, bytes });
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: impl Into<String>, items: impl IntoIterator<Item = T>) -> Result<()> {
        let mut bytes = Vec::new();
        for item in items {
            serde_json::to_writer(&mut bytes, &item)?;
            bytes.push(b'\n');
        }
        self.artifacts.push(Artifact {
            name: name.into(),
            bytes,
        });
        Ok(())
    }
}

pub fn run(r: &Resolved) -> Result<Outcome> {
    let v = &r.values;
    let seed = r.seed();
    let out = match r.experiment {
        Experiment::Simulate => simulate(v),
        Experiment::Train | Experiment::AltTrain => train_run(r.experiment, v, seed),
        Experiment::Snr => snr(v, seed),
        Experiment::GradCompare => grad_compare(v, seed),
        Experiment::KlCheck => kl_check(v, seed),
        Experiment::InferGrid => infer_grid(v, seed),
        Experiment::ZhatCheck => zhat_check(v, seed),
    };
    out.with_context(|| format!("experiment `{}`", r.experiment))
}

// Accessors for defaulted keys; `resolve` guarantees they are present.
fn get<T: Clone>(x: &Option<T>, key: &str) -> Result<T> {
    x.clone().ok_or_else(|| anyhow!("missing required key `{key}`"))
}

fn kind(s: &str, key: &str) -> Result<ObjectiveKind> {
    s.parse().map_err(|e| anyhow!("key `{key}`: {e}"))
}

fn mask(s: &str) -> Result<ParamMask> {
    match s {
        "all" => Ok(ParamMask::All),
        "model" => Ok(ParamMask::Model),
        "proposal" => Ok(ParamMask::Proposal),
        other => bail!("key `trainable`: expected all, model or proposal, got `{other}`"),
    }
}

fn optimizer(s: &str) -> Result<Optimizer> {
    match s {
        "sga" => Ok(Optimizer::Sga),
        "adam" => Ok(Optimizer::adam()),
        other => bail!("key `optimizer`: expected sga or adam, got `{other}`"),
    }
}

fn data(v: &ExperimentConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = LgssmParams::new(get(&v.data_theta1, "data_theta1")?, get(&v.data_theta2, "data_theta2")?)?;
    Ok(lgssm_simulate(p, get(&v.len, "len")?, get(&v.data_seed, "data_seed")?)?)
}

/// EM fit of θ from the fixed starting point, the reference for gaps and quality.
pub fn em_reference(y: &[f64]) -> Result<EmResult> {
    Ok(em_fit(
        y,
        LgssmParams::new(EM_INIT.0, EM_INIT.1)?,
        EM_DEFAULT_MAX_ITERS,
        EM_DEFAULT_TOL,
    )?)
}

/// The LGSSM at `theta` with the named proposal family.
pub fn lgssm_setup(theta: LgssmParams, proposal: &str, detach: bool) -> Result<Setup> {
    let q = match proposal {
        "bootstrap" => ProposalSpec::Bootstrap,
        "affine" => ProposalSpec::Affine(AffineProposalParams::bootstrap_like(theta.theta1)),
        "optimal" => ProposalSpec::Affine(AffineProposalParams::locally_optimal(&LinearGaussianSsm::lgssm(theta))),
        other => bail!("key `proposal`: expected bootstrap, affine or optimal, got `{other}`"),
    };
    Ok(Setup::new(ModelSpec::Lgssm(theta), q).detached(detach))
}

/// Setup and observations for experiments that accept either model.
fn model_and_data(v: &ExperimentConfig) -> Result<(Setup, Vec<f64>)> {
    match get(&v.model, "model")?.as_str() {
        "lgssm" => {
            let theta = LgssmParams::new(get(&v.theta1, "theta1")?, get(&v.theta2, "theta2")?)?;
            let setup = lgssm_setup(theta, &get(&v.proposal, "proposal")?, get(&v.detach, "detach")?)?;
            Ok((setup, data(v)?.1))
        }
        "unknown-mean" => Ok((
            Setup::unknown_mean(get(&v.mu_q, "mu_q")?, get(&v.log_var_q, "log_var_q")?),
            vec![get(&v.x_obs, "x_obs")?],
        )),
        other => bail!("key `model`: expected lgssm or unknown-mean, got `{other}`"),
    }
}

fn simulate(v: &ExperimentConfig) -> Result<Outcome> {
    let (x, y) = data(v)?;
    let schema = [col("t", Int), col("x", Real), col("y", Real)];
    let rows: Vec<Vec<Cell>> = x
        .iter()
        .zip(&y)
        .enumerate()
        .map(|(t, (&x, &y))| vec![t.into(), x.into(), y.into()])
        .collect();
    let mut out = Outcome::default();
    out.csv("data.csv", &schema, &rows)?;
    Ok(out)
}

/// Column order of `trace.csv`: step, elbo, log_marginal, proposal_quality,
/// then one column per parameter in layout order.
pub fn trace_schema(names: &[String]) -> Vec<Column> {
    let mut s = vec![
        col("step", Int),
        col("elbo", Real),
        opt("log_marginal", Real),
        opt("proposal_quality", Real),
    ];
    s.extend(names.iter().map(|n| col(n.clone(), Real)));
    s
}

pub fn trace_rows(records: &[TrainRecord]) -> Vec<Vec<Cell>> {
    records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.step.into(),
                r.elbo.into(),
                r.log_marginal.into(),
                r.proposal_quality.into(),
            ];
            row.extend(r.params.iter().map(|&p| Cell::Real(p)));
            row
        })
        .collect()
}

/// Inverse of [`trace_rows`].
pub fn records_from_rows(rows: &[Vec<Cell>]) -> Result<Vec<TrainRecord>> {
    let real = |c: &Cell| match c {
        Cell::Real(x) => Ok(Some(*x)),
        Cell::Empty => Ok(None),
        other => Err(anyhow!("expected a real, got {other:?}")),
    };
    rows.iter()
        .map(|row| {
            let step = match row.first() {
                Some(Cell::Int(s)) if *s >= 0 => *s as usize,
                other => bail!("expected a step, got {other:?}"),
            };
            if row.len() < 4 {
                bail!("short row");
            }
            Ok(TrainRecord {
                step,
                elbo: real(&row[1])?.ok_or_else(|| anyhow!("missing elbo"))?,
                log_marginal: real(&row[2])?,
                proposal_quality: real(&row[3])?,
                params: row[4..]
                    .iter()
                    .map(|c| real(c)?.ok_or_else(|| anyhow!("missing parameter")))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    step: usize,
    elbo: f64,
    log_marginal: Option<f64>,
    proposal_quality: Option<f64>,
    params: serde_json::Map<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diverged: Option<&'a str>,
}

fn train_run(experiment: Experiment, v: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let (setup, y) = model_and_data(v)?;
    let objective = match experiment {
        Experiment::AltTrain => TrainObjective::Alternating {
            theta: Objective::new(kind(&get(&v.theta_kind, "theta_kind")?, "theta_kind")?, get(&v.theta_k, "theta_k")?),
            phi: Objective::new(kind(&get(&v.phi_kind, "phi_kind")?, "phi_kind")?, get(&v.phi_k, "phi_k")?),
        },
        _ => TrainObjective::Single(Objective::new(kind(&get(&v.kind, "kind")?, "kind")?, get(&v.k, "k")?)),
    };
    let mut cfg = TrainConfig::new(objective, get(&v.lr, "lr")?, get(&v.steps, "steps")?, seed);
    cfg.optimizer = optimizer(&get(&v.optimizer, "optimizer")?)?;
    cfg.trainable = mask(&get(&v.trainable, "trainable")?)?;
    cfg.eval_every = get(&v.eval_every, "eval_every")?;
    cfg.scale_by_length = get(&v.scale_by_length, "scale_by_length")?;
    cfg.elbo_reps = get(&v.elbo_reps, "elbo_reps")?;

    let lgssm = matches!(setup.model, ModelSpec::Lgssm(_));
    let em = if lgssm { Some(em_reference(&y)?) } else { None };
    let quality_k = get(&v.quality_k, "quality_k")?;
    if quality_k > 0 {
        let Some(em) = &em else {
            bail!("key `quality_k`: proposal quality needs the lgssm model");
        };
        cfg.quality = Some(QualityConfig {
            theta_ref: (em.theta_hat.theta1, em.theta_hat.theta2),
            k_eval: quality_k,
            sampler: kind(&get(&v.quality_sampler, "quality_sampler")?, "quality_sampler")?,
            reps: get(&v.quality_reps, "quality_reps")?,
            seed: derive_seed(seed, 0x9A11),
        });
    }
    let trace = train(&setup, &y, &cfg)?;

    let mut out = Outcome::default();
    out.csv("trace.csv", &trace_schema(&trace.names), &trace_rows(&trace.records))?;
    let last_step = trace.last().step;
    out.jsonl(
        "trace.jsonl",
        trace.records.iter().map(|r| JsonRecord {
            step: r.step,
            elbo: r.elbo,
            log_marginal: r.log_marginal,
            proposal_quality: r.proposal_quality,
            params: trace
                .names
                .iter()
                .zip(&r.params)
                .map(|(n, &p)| (n.clone(), serde_json::json!(p)))
                .collect(),
            diverged: (trace.diverged && r.step == last_step).then(|| trace.failure.as_deref().unwrap_or("diverged")),
        }),
    )?;
    out.csv("summary.csv", &summary_schema(), &[summary_row(&trace, em.as_ref())])?;
    out.checks = train_checks(&trace, &cfg, lgssm);
    Ok(out)
}

fn summary_schema() -> Vec<Column> {
    vec![
        col("diverged", Int),
        opt("failure", Str),
        col("records", Int),
        col("final_step", Int),
        col("final_elbo", Real),
        opt("final_log_marginal", Real),
        opt("em_log_marginal", Real),
        opt("gap_to_em", Real),
        opt("final_proposal_quality", Real),
    ]
}

fn summary_row(trace: &TrainTrace, em: Option<&EmResult>) -> Vec<Cell> {
    let last = trace.last();
    let em_lm = em.map(|e| e.log_marginal_at_optimum);
    let gap = em_lm.zip(last.log_marginal).map(|(a, b)| a - b);
    vec![
        trace.diverged.into(),
        trace.failure.clone().filter(|s| !s.is_empty()).map_or(Cell::Empty, Cell::Str),
        trace.records.len().into(),
        last.step.into(),
        last.elbo.into(),
        last.log_marginal.into(),
        em_lm.into(),
        gap.into(),
        last.proposal_quality.into(),
    ]
}

fn train_checks(trace: &TrainTrace, cfg: &TrainConfig, lgssm: bool) -> Vec<Check> {
    let mut checks = vec![Check::new(
        "finite",
        !trace.diverged,
        trace.failure.clone().unwrap_or_else(|| "every recorded value finite".into()),
    )];
    // θ training with a large SMC objective should climb the exact likelihood.
    let theta_obj = match cfg.objective {
        TrainObjective::Single(o) => o,
        TrainObjective::Alternating { theta, .. } => theta,
    };
    let theta_trained = cfg.trainable != ParamMask::Proposal;
    if lgssm && theta_trained && theta_obj.kind == ObjectiveKind::Smc && theta_obj.k >= 100 && !trace.diverged {
        let first = trace.records[0].log_marginal;
        let last = trace.last().log_marginal;
        if let (Some(a), Some(b)) = (first, last) {
            checks.push(Check::new("log_marginal_improves", b > a, format!("{a} -> {b}")));
        }
    }
    checks
}

pub fn grad_stats_schema() -> Vec<Column> {
    vec![
        col("estimator", Str),
        col("k", Int),
        col("component", Str),
        col("n", Int),
        col("mean", Real),
        col("std", Real),
        col("stderr", Real),
        opt("snr", Real),
        opt("snr_stderr", Real),
    ]
}

fn grad_stats_rows(estimator: GradientEstimator, k: usize, s: &GradStats) -> Vec<Vec<Cell>> {
    (0..s.names.len())
        .map(|c| {
            vec![
                estimator.as_str().into(),
                k.into(),
                s.names[c].clone().into(),
                s.n.into(),
                s.mean[c].into(),
                s.std[c].into(),
                s.stderr(c).into(),
                s.snr[c].into(),
                s.snr[c].map(|x| snr_stderr(x, s.n)).into(),
            ]
        })
        .collect()
}

fn samples_csv(out: &mut Outcome, name: String, s: &GradStats) -> Result<()> {
    let Some(samples) = &s.samples else {
        return Ok(());
    };
    let schema: Vec<Column> = s.names.iter().map(|n| col(n.clone(), Real)).collect();
    let rows: Vec<Vec<Cell>> = samples.iter().map(|r| r.iter().map(|&x| Cell::Real(x)).collect()).collect();
    out.csv(name, &schema, &rows)
}

fn component(s: &GradStats, name: &str) -> Result<usize> {
    s.index_of(name)
        .ok_or_else(|| anyhow!("key `check_component`: `{name}` is not one of {:?}", s.names))
}

/// SNR falls at every step of `profile` by more than two combined standard
/// errors, and the log-log slope lies in `slope`.
pub fn snr_checks(profile: &[(usize, GradStats)], c: usize, slope: (f64, f64)) -> Vec<Check> {
    let snrs: Vec<Option<(f64, f64)>> = profile
        .iter()
        .map(|(_, s)| s.snr[c].map(|x| (x, snr_stderr(x, s.n))))
        .collect();
    if snrs.iter().any(Option::is_none) || profile.len() < 2 {
        return vec![Check::new("snr_decreasing", false, "SNR undefined or fewer than two K")];
    }
    let snrs: Vec<(f64, f64)> = snrs.into_iter().flatten().collect();
    let mut decreasing = true;
    let mut detail = Vec::new();
    for (i, w) in snrs.windows(2).enumerate() {
        let ((a, sa), (b, sb)) = (w[0], w[1]);
        let z = (a - b) / (sa * sa + sb * sb).sqrt();
        decreasing &= z > 2.0;
        detail.push(format!("K={}: {a:.4} -> K={}: {b:.4} (z {z:.2})", profile[i].0, profile[i + 1].0));
    }
    let xs: Vec<f64> = profile.iter().map(|(k, _)| (*k as f64).ln()).collect();
    let ys: Vec<f64> = snrs.iter().map(|(s, _)| s.ln()).collect();
    let m = ols_slope(&xs, &ys);
    vec![
        Check::new("snr_decreasing", decreasing, detail.join("; ")),
        Check::new(
            "snr_slope",
            m >= slope.0 && m <= slope.1,
            format!("slope {m:.4} in [{}, {}]", slope.0, slope.1),
        ),
    ]
}

fn snr(v: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let (setup, y) = model_and_data(v)?;
    let estimator: GradientEstimator = get(&v.estimator, "estimator")?
        .parse()
        .map_err(|e| anyhow!("key `estimator`: {e}"))?;
    let kind = kind(&get(&v.kind, "kind")?, "kind")?;
    let ks = get(&v.ks, "ks")?;
    let keep = get(&v.keep_samples, "keep_samples")?;
    let profile = snr_profile(estimator, kind, &setup, &y, ParamMask::All, &ks, get(&v.samples, "samples")?, seed, keep)?;

    let mut out = Outcome::default();
    let rows: Vec<Vec<Cell>> = profile
        .iter()
        .flat_map(|(k, s)| grad_stats_rows(estimator, *k, s))
        .collect();
    out.csv("snr.csv", &grad_stats_schema(), &rows)?;
    for (k, s) in &profile {
        samples_csv(&mut out, format!("samples_k{k}.csv"), s)?;
    }
    let c = component(&profile[0].1, &get(&v.check_component, "check_component")?)?;
    out.checks = snr_checks(&profile, c, (get(&v.slope_min, "slope_min")?, get(&v.slope_max, "slope_max")?));
    Ok(out)
}

/// `Var(a) > Var(b)` with the F test significant at 3σ.
pub fn variance_check(name: &str, a: &SampleStats, b: &SampleStats) -> Check {
    let p = variance_ratio_p_value(a, b);
    let passed = a.std() > b.std() && p.is_some_and(|p| p < THREE_SIGMA_P);
    Check::new(name, passed, format!("std {:.6e} vs {:.6e}, p = {p:?}", a.std(), b.std()))
}

fn grad_compare(v: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let theta = LgssmParams::new(get(&v.theta1, "theta1")?, get(&v.theta2, "theta2")?)?;
    let setup = lgssm_setup(theta, &get(&v.proposal, "proposal")?, get(&v.detach, "detach")?)?;
    let (_, y) = data(v)?;
    let kind = kind(&get(&v.kind, "kind")?, "kind")?;
    let k = get(&v.k, "k")?;
    let n = get(&v.samples, "samples")?;
    let keep = get(&v.keep_samples, "keep_samples")?;

    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    // All estimators share the same streams.
    for e in GradientEstimator::ALL {
        let s = gradient_stats(e, kind, &setup, &y, k, ParamMask::All, n, seed, keep)?;
        rows.extend(grad_stats_rows(e, k, &s));
        samples_csv(&mut out, format!("grad_samples_{e}.csv"), &s)?;
        stats.push(s);
    }
    out.csv("grad_compare.csv", &grad_stats_schema(), &rows)?;
    let c = component(&stats[0], &get(&v.check_component, "check_component")?)?;
    out.checks = vec![variance_check(
        "reinforce_variance_exceeds_reparam",
        &stats[1].component(c),
        &stats[0].component(c),
    )];
    Ok(out)
}

/// The two-state model shipped with `kl-check`, observed as `[0, 1]`.
pub fn bundled_hmm() -> (DiscreteHmmSpec, DiscreteProposal, Vec<f64>) {
    let spec = DiscreteHmmSpec::new(
        vec![0.5, 0.5],
        vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        2,
    )
    .expect("valid tables");
    let q = DiscreteProposal::bootstrap(&spec).perturbed(0.2);
    (spec, q, vec![0.0, 1.0])
}

/// Random model with 1 to 3 states, 2 or 3 symbols and two time steps.
pub fn random_hmm<R: Rng + ?Sized>(rng: &mut R) -> Result<(DiscreteHmmSpec, DiscreteProposal, Vec<f64>)> {
    let states = rng.random_range(1..=3);
    let symbols = rng.random_range(2..=3);
    let spec = DiscreteHmmSpec::random(states, symbols, 2, rng)?;
    let q = DiscreteProposal::random(states, 2, rng);
    let obs = (0..2).map(|_| rng.random_range(0..symbols) as f64).collect();
    Ok((spec, q, obs))
}

fn kl_check(v: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let k = get(&v.k, "k")?;
    let targets = match get(&v.targets, "targets")?.as_str() {
        "filtering" => IntermediateTargets::Filtering,
        "smoothing" => IntermediateTargets::Smoothing,
        other => bail!("key `targets`: expected filtering or smoothing, got `{other}`"),
    };
    let tol = get(&v.tolerance, "tolerance")?;
    let mut instances = vec![bundled_hmm()];
    for i in 0..get(&v.random_models, "random_models")? {
        instances.push(random_hmm(&mut replicate_rng(seed, i as u64))?);
    }

    let schema = [
        col("instance", Int),
        col("scheme", Str),
        col("states", Int),
        col("horizon", Int),
        col("k", Int),
        col("log_z", Real),
        col("elbo", Real),
        col("kl", Real),
        col("residual", Real),
        col("target_mass", Real),
    ];
    let mut rows = Vec::new();
    let mut reports: Vec<KlGapReport> = Vec::new();
    for (i, (spec, q, obs)) in instances.iter().enumerate() {
        let is = enumerate_kl_gap_is(spec, q, obs, k).with_context(|| format!("instance {i}"))?;
        let smc = enumerate_kl_gap_smc(spec, q, obs, k, targets).with_context(|| format!("instance {i}"))?;
        for (scheme, r) in [("is", is), ("smc", smc)] {
            rows.push(vec![
                i.into(),
                scheme.into(),
                spec.num_states.into(),
                spec.horizon.into(),
                k.into(),
                r.log_z_exact.into(),
                r.elbo_exact.into(),
                r.kl_exact.into(),
                r.residual.into(),
                r.target_mass.into(),
            ]);
            reports.push(r);
        }
    }
    let mut out = Outcome::default();
    out.csv("kl_check.csv", &schema, &rows)?;
    let worst = reports.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let min_kl = reports.iter().map(|r| r.kl_exact).fold(f64::INFINITY, f64::min);
    let mass = reports.iter().map(|r| (r.target_mass - 1.0).abs()).fold(0.0, f64::max);
    out.checks = vec![
        Check::new("identity_residual", worst <= tol, format!("max |residual| {worst:.3e}")),
        Check::new("kl_nonnegative", min_kl >= -tol, format!("min KL {min_kl:.3e}")),
        Check::new("target_normalized", mass <= tol, format!("max |mass - 1| {mass:.3e}")),
    ];
    Ok(out)
}

fn objectives(kinds: &[String], ks: &[usize], key: &str) -> Result<Vec<Objective>> {
    let mut objs = Vec::new();
    for kname in kinds {
        let kd = kind(kname, key)?;
        objs.extend(ks.iter().map(|&k| Objective::new(kd, k)));
    }
    Ok(objs)
}

fn cell(cells: &[GridCell], train: Objective, test: Objective) -> Option<&GridCell> {
    cells.iter().find(|c| c.train == train && c.test == test)
}

/// The three grid trends:
/// - along K_test the metric does not rise by more than 3 combined SE,
/// - along K_train it does not fall by more than 3 combined SE,
/// - (train IS, test SMC) beats (train SMC, test IS) at every shared K.
pub fn grid_trends(cells: &[GridCell]) -> Vec<Check> {
    let mut checks = Vec::new();
    let q = |c: Option<&GridCell>| c.and_then(|c| c.quality.filter(|q| q.reps > 0));
    let mut kinds: Vec<ObjectiveKind> = Vec::new();
    let mut ks_train: Vec<usize> = Vec::new();
    let mut ks_test: Vec<usize> = Vec::new();
    for c in cells {
        for kd in [c.train.kind, c.test.kind] {
            if !kinds.contains(&kd) {
                kinds.push(kd);
            }
        }
        if !ks_train.contains(&c.train.k) {
            ks_train.push(c.train.k);
        }
        if !ks_test.contains(&c.test.k) {
            ks_test.push(c.test.k);
        }
    }
    ks_train.sort_unstable();
    ks_test.sort_unstable();

    // One chain per fixed end: walk `ks` on the moving side.
    let chain = |fixed: Objective, moving: ObjectiveKind, ks: &[usize], along_test: bool, sign: f64| {
        let mut ok = true;
        let mut detail = Vec::new();
        let mut missing = false;
        for w in ks.windows(2) {
            let pick = |k: usize| {
                let m = Objective::new(moving, k);
                if along_test {
                    q(cell(cells, fixed, m))
                } else {
                    q(cell(cells, m, fixed))
                }
            };
            match (pick(w[0]), pick(w[1])) {
                (Some(a), Some(b)) => {
                    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
                    // sign = -1: should not rise; sign = +1: should not fall.
                    let viol = if sign < 0.0 { b.mean > a.mean + 3.0 * se } else { b.mean < a.mean - 3.0 * se };
                    ok &= !viol;
                    detail.push(format!("{}->{}: {:.3}->{:.3}±{:.3}", w[0], w[1], a.mean, b.mean, se));
                }
                _ => missing = true,
            }
        }
        (ok && !missing, detail.join(" "))
    };

    for &tk in &kinds {
        for &trk in &kinds {
            for &k in &ks_train {
                let train = Objective::new(trk, k);
                if cells.iter().all(|c| c.train != train) || cells.iter().all(|c| c.test.kind != tk) {
                    continue;
                }
                let (ok, d) = chain(train, tk, &ks_test, true, -1.0);
                checks.push(Check::new(format!("k_test_improves[train={trk}{k},test={tk}]"), ok, d));
            }
            for &k in &ks_test {
                let test = Objective::new(tk, k);
                if cells.iter().all(|c| c.test != test) || cells.iter().all(|c| c.train.kind != trk) {
                    continue;
                }
                let (ok, d) = chain(test, trk, &ks_train, false, 1.0);
                checks.push(Check::new(format!("k_train_worsens[train={trk},test={tk}{k}]"), ok, d));
            }
        }
    }
    for &k in ks_train.iter().filter(|k| ks_test.contains(k)) {
        let is = Objective::new(ObjectiveKind::Is, k);
        let smc = Objective::new(ObjectiveKind::Smc, k);
        if let (Some(a), Some(b)) = (q(cell(cells, is, smc)), q(cell(cells, smc, is))) {
            checks.push(Check::new(
                format!("is_train_smc_test_beats_smc_train_is_test[k={k}]"),
                a.mean < b.mean,
                format!("{:.3} vs {:.3}", a.mean, b.mean),
            ));
        }
    }
    for c in cells.iter().filter(|c| c.quality.is_none()) {
        checks.push(Check::new(
            format!("trained[{}{}]", c.train.kind, c.train.k),
            false,
            c.failure.clone().unwrap_or_default(),
        ));
    }
    checks
}

fn infer_grid(v: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let (_, y) = data(v)?;
    let em = em_reference(&y)?;
    let theta = em.theta_hat;
    let setup = lgssm_setup(theta, "affine", false)?;
    let cfg = GridConfig {
        train: objectives(&get(&v.train_kinds, "train_kinds")?, &get(&v.ks_train, "ks_train")?, "train_kinds")?,
        test: objectives(&get(&v.test_kinds, "test_kinds")?, &get(&v.ks_test, "ks_test")?, "test_kinds")?,
        optimizer: optimizer(&get(&v.optimizer, "optimizer")?)?,
        lr: get(&v.lr, "lr")?,
        steps: get(&v.steps, "steps")?,
        seed,
        eval_reps: get(&v.eval_reps, "eval_reps")?,
        train_runs: get(&v.train_runs, "train_runs")?,
    };
    let cells = infer_eval_grid(&setup, &y, &cfg)?;

    let schema = [
        col("train_kind", Str),
        col("train_k", Int),
        col("test_kind", Str),
        col("test_k", Int),
        opt("mean", Real),
        opt("stderr", Real),
        col("reps", Int),
        col("degenerate", Int),
        col("diverged", Int),
        col("theta1", Real),
        col("theta2", Real),
    ];
    let rows: Vec<Vec<Cell>> = cells
        .iter()
        .map(|c| {
            vec![
                c.train.kind.as_str().into(),
                c.train.k.into(),
                c.test.kind.as_str().into(),
                c.test.k.into(),
                c.quality.map(|q| q.mean).into(),
                c.quality.map(|q| q.stderr).into(),
                c.quality.map_or(0, |q| q.reps).into(),
                c.quality.map_or(0, |q| q.degenerate).into(),
                c.diverged.into(),
                theta.theta1.into(),
                theta.theta2.into(),
            ]
        })
        .collect();
    let mut out = Outcome::default();
    out.csv("grid.csv", &schema, &rows)?;
    out.checks = grid_trends(&cells);
    Ok(out)
}

fn zhat_check(v: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let p = LgssmParams::new(get(&v.data_theta1, "data_theta1")?, get(&v.data_theta2, "data_theta2")?)?;
    let (_, y) = data(v)?;
    let exact = lgssm_log_marginal(p, &y)?;
    let setup = Setup::new(ModelSpec::Lgssm(p), ProposalSpec::Bootstrap);
    let kernel = setup.kernel(&y);
    let k = get(&v.k, "k")?;
    let reps = get(&v.reps, "reps")?;
    let z_max = get(&v.z_max, "z_max")?;

    let schema = [
        col("kind", Str),
        col("k", Int),
        col("reps", Int),
        col("log_z_exact", Real),
        col("z_exact", Real),
        col("mean_z_hat", Real),
        col("stderr", Real),
        col("z_score", Real),
    ];
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    for (i, name) in get(&v.kinds, "kinds")?.iter().enumerate() {
        let kd = kind(name, "kinds")?;
        let lz = log_z_samples(&kernel, kd, k, reps, derive_seed(seed, i as u64))?;
        // Work with Ẑ / Z so nothing underflows; rescale for the report.
        let ratios: Vec<f64> = lz.iter().map(|l| (l - exact).exp()).collect();
        let s = SampleStats::from_slice(&ratios);
        let z_exact = exact.exp();
        let z = (s.mean - 1.0) / s.stderr();
        rows.push(vec![
            kd.as_str().into(),
            k.into(),
            reps.into(),
            exact.into(),
            z_exact.into(),
            (s.mean * z_exact).into(),
            (s.stderr() * z_exact).into(),
            z.into(),
        ]);
        out.checks.push(Check::new(
            format!("unbiased[{kd}]"),
            z.abs() <= z_max,
            format!("mean ratio {:.5} ± {:.5}, z {z:.3}", s.mean, s.stderr()),
        ));
    }
    out.csv("zhat.csv", &schema, &rows)?;
    Ok(out)
}
