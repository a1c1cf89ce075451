//! Acceptance suite. Runs every criterion at its stated size and tolerance and
//! prints one PASS/FAIL line per criterion; exits nonzero if any fails.
//!
//! `cargo test -p seqelbo-cli --test acceptance -- 5 7` runs a subset.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use toml::{Table, Value};

use seqelbo::elbo::{enumerate_kl_gap_is, enumerate_kl_gap_smc, log_z_samples, ObjectiveKind};
use seqelbo::grad::{fd_elbo_stats, gradient_stats, GradientEstimator, FD_STEP};
use seqelbo::models::{lgssm_simulate, DiscreteKernel, IntermediateTargets};
use seqelbo::oracle::{hmm_forward, hmm_posterior_proposal};
use seqelbo::rng::replicate_rng;
use seqelbo::stats::z_score;
use seqelbo::train::{train, Objective, QualityConfig, TrainConfig, TrainObjective};
use seqelbo::{AffineProposalParams, DiscreteHmmSpec, DiscreteProposal, LgssmParams, ModelSpec, ParamMask, ProposalSpec, Setup};
use seqelbo_cli::config::resolve_tables;
use seqelbo_cli::experiments::{bundled_hmm, em_reference, random_hmm};
use seqelbo_cli::manifest::MANIFEST_NAME;
use seqelbo_cli::{run_experiment, Check, Experiment, RunManifest};

struct Verdict {
    passed: bool,
    detail: Vec<String>,
}

impl Verdict {
    fn from_checks(checks: &[Check]) -> Self {
        Verdict {
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            detail: checks
                .iter()
                .map(|c| format!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail))
                .collect(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 12] = [
    (1, "estimator unbiasedness", c1),
    (2, "KL-gap identity", c2),
    (3, "exact posterior closes the IS gap", c3),
    (4, "exact SMC witnesses", c4),
    (5, "gradient correctness", c5),
    (6, "gradient variance ordering", c6),
    (7, "SNR decay", c7),
    (8, "model-learning ordering", c8),
    (9, "proposal-learning degradation", c9),
    (10, "alternating objective benefit", c10),
    (11, "inference grid trends", c11),
    (12, "reproducibility", c12),
];

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = f();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag}  {name}  ({:.1} s)", t.elapsed().as_secs_f64());
        for d in &v.detail {
            println!("      {d}");
        }
        if !v.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}

/// Runs an experiment in-process with `overrides` on top of its defaults.
fn run_cli(experiment: Experiment, overrides: &[(&str, Value)]) -> Vec<Check> {
    let dir = tempfile::tempdir().unwrap();
    let mut o: Vec<(String, Value)> = overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    o.push(("out".into(), Value::String(dir.path().to_string_lossy().into_owned())));
    let r = resolve_tables(experiment, Table::new(), &o).unwrap();
    run_experiment(&r).unwrap().manifest.checks
}

fn int(i: i64) -> Value {
    Value::Integer(i)
}

fn c1() -> Verdict {
    Verdict::from_checks(&run_cli(Experiment::ZhatCheck, &[("len", int(5)), ("k", int(10)), ("reps", int(100_000))]))
}

fn c2() -> Verdict {
    Verdict::from_checks(&run_cli(
        Experiment::KlCheck,
        &[("random_models", int(50)), ("k", int(2)), ("tolerance", Value::Float(1e-10))],
    ))
}

fn c3() -> Verdict {
    let mut checks = Vec::new();
    let mut rng = replicate_rng(3, 0);
    let mut instances = vec![bundled_hmm()];
    instances.extend((0..5).map(|_| random_hmm(&mut rng).unwrap()));
    for (i, (spec, _, obs)) in instances.iter().enumerate() {
        let post = hmm_posterior_proposal(spec, obs).unwrap();
        for k in [1, 2, 3] {
            let r = enumerate_kl_gap_is(spec, &post, obs, k).unwrap();
            let gap = (r.elbo_exact - r.log_z_exact).abs();
            checks.push(Check::new(
                format!("exact[{i},K={k}]"),
                r.kl_exact.abs() <= 1e-12 && gap <= 1e-12,
                format!("KL {:.2e}, |ELBO - log Z| {gap:.2e}", r.kl_exact),
            ));
        }
        let off = enumerate_kl_gap_is(spec, &post.perturbed(0.1), obs, 2).unwrap();
        // A one-state model has nothing to perturb.
        if spec.num_states > 1 {
            checks.push(Check::new(format!("perturbed[{i}]"), off.kl_exact > 0.0, format!("KL {:.3e}", off.kl_exact)));
        }
    }
    Verdict::from_checks(&checks)
}

fn c4() -> Verdict {
    // Both states emit with the same probabilities, so every weight is constant.
    let spec = DiscreteHmmSpec::new(
        vec![0.4, 0.6],
        vec![vec![0.9, 0.1], vec![0.35, 0.65]],
        vec![vec![0.3, 0.7], vec![0.3, 0.7]],
        3,
    )
    .unwrap();
    let obs = [1.0, 0.0, 1.0];
    let exact = hmm_forward(&spec, &obs).unwrap().log_marginal;
    let q = DiscreteProposal::bootstrap(&spec);
    let kernel = DiscreteKernel::new(&spec, &q, &obs, IntermediateTargets::Filtering).unwrap();
    let z: Vec<f64> = (0..100)
        .map(|s| log_z_samples(&kernel, ObjectiveKind::Smc, 2, 1, s).unwrap()[0].exp())
        .collect();
    let spread = z.iter().map(|x| (x - exact.exp()).abs()).fold(0.0, f64::max);
    let enumerated = enumerate_kl_gap_smc(&spec, &q, &obs, 2, IntermediateTargets::Filtering).unwrap();

    let (spec2, _, obs2) = bundled_hmm();
    let post = hmm_posterior_proposal(&spec2, &obs2).unwrap();
    let mismatched = enumerate_kl_gap_smc(&spec2, &post, &obs2, 2, IntermediateTargets::Filtering).unwrap();
    let matched = enumerate_kl_gap_smc(&spec2, &post, &obs2, 2, IntermediateTargets::Smoothing).unwrap();
    Verdict::from_checks(&[
        Check::new(
            "zero_variance",
            spread <= 1e-12 * exact.exp(),
            format!("max |Ẑ - Z| over 100 seeds {spread:.2e} (Z = {:.6e})", exact.exp()),
        ),
        Check::new("enumerated_kl_zero", enumerated.kl_exact.abs() <= 1e-12, format!("KL {:.2e}", enumerated.kl_exact)),
        Check::new(
            "mismatched_targets_kl_positive",
            mismatched.kl_exact > 0.0,
            format!("KL {:.3e} (smoothing targets: {:.2e})", mismatched.kl_exact, matched.kl_exact),
        ),
    ])
}

fn c5() -> Verdict {
    let (_, y) = lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), 200, 1).unwrap();
    let y = &y[..3];
    let theta = ModelSpec::Lgssm(LgssmParams::new(0.9, 1.0).unwrap());
    let affine = AffineProposalParams {
        a: 0.5,
        b: 0.3,
        c: 0.1,
        log_var: -0.5,
        b1: 0.2,
        c1: 0.0,
        log_var1: 0.0,
    };
    let n = 1_000_000;
    let mut checks = Vec::new();
    for (label, setup) in [
        ("bootstrap", Setup::new(theta, ProposalSpec::Bootstrap)),
        ("affine", Setup::new(theta, ProposalSpec::Affine(affine))),
    ] {
        let fd = fd_elbo_stats(ObjectiveKind::Smc, &setup, y, 2, ParamMask::All, n, 11, FD_STEP).unwrap();
        for e in [GradientEstimator::ReinforceReparam, GradientEstimator::ReinforceFull] {
            let g = gradient_stats(e, ObjectiveKind::Smc, &setup, y, 2, ParamMask::All, n, 12, false).unwrap();
            let zs: Vec<f64> = (0..g.names.len())
                .map(|c| z_score(g.mean[c], g.stderr(c), fd.mean[c], fd.stderr(c)))
                .collect();
            let worst = zs.iter().map(|z| z.abs()).fold(0.0, f64::max);
            checks.push(Check::new(format!("{label}/{e}"), worst <= 3.0, format!("z per component {zs:.2?}")));
        }
    }
    Verdict::from_checks(&checks)
}

fn c6() -> Verdict {
    Verdict::from_checks(&run_cli(
        Experiment::GradCompare,
        &[
            ("len", int(200)),
            ("theta1", Value::Float(0.1)),
            ("k", int(16)),
            ("samples", int(100)),
            ("keep_samples", Value::Boolean(false)),
        ],
    ))
}

fn c7() -> Verdict {
    let cfg = |seed: i64| {
        [
            ("seed", int(seed)),
            ("ks", Value::Array(vec![int(1), int(10), int(100), int(1000)])),
            ("samples", int(10_000)),
            ("keep_samples", Value::Boolean(false)),
        ]
    };
    let mut v = Verdict::from_checks(&run_cli(Experiment::Snr, &cfg(3)));
    // Context only: the same run under other seeds.
    let passing = (0..10)
        .filter(|&s| run_cli(Experiment::Snr, &cfg(s)).iter().all(|c| c.passed))
        .count();
    v.detail.push(format!("info: all SNR checks pass on {passing}/10 of seeds 0..9"));
    v
}

fn c8() -> Verdict {
    let mut wins = [0usize; 2];
    let mut detail = Vec::new();
    for s in 0..3u64 {
        let (_, y) = lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), 200, 100 + s).unwrap();
        let em = em_reference(&y).unwrap();
        let init = Setup::new(ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()), ProposalSpec::Bootstrap).detached(true);
        let gap = |kind, k| {
            let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(kind, k)), 0.01, 500, s);
            cfg.eval_every = 500;
            let t = train(&init, &y, &cfg).unwrap();
            assert!(!t.diverged, "{kind}-{k} diverged: {:?}", t.failure);
            em.log_marginal_at_optimum - t.last().log_marginal.unwrap()
        };
        let (smc100, is100, smc10) = (gap(ObjectiveKind::Smc, 100), gap(ObjectiveKind::Is, 100), gap(ObjectiveKind::Smc, 10));
        wins[0] += (smc100 < is100) as usize;
        wins[1] += (smc100 < smc10) as usize;
        detail.push(format!("seed {s}: gap SMC-100 {smc100:.3}, IS-100 {is100:.3}, SMC-10 {smc10:.3}"));
    }
    let mut v = Verdict::from_checks(&[
        Check::new("smc100_beats_is100", wins[0] >= 2, format!("{}/3 seeds", wins[0])),
        Check::new("smc100_beats_smc10", wins[1] >= 2, format!("{}/3 seeds", wins[1])),
    ]);
    v.detail.extend(detail);
    v
}

fn c9() -> Verdict {
    let mut wins = 0;
    let mut detail = Vec::new();
    for s in 0..3u64 {
        let err = |k| {
            let mut cfg = TrainConfig::new(TrainObjective::Single(Objective::new(ObjectiveKind::Is, k)), 0.01, 500, s);
            cfg.eval_every = 500;
            let t = train(&Setup::unknown_mean(0.01, 0.01), &[2.3], &cfg).unwrap();
            (t.param(t.last(), "mu_q").unwrap() - 1.15).abs()
        };
        let (e1, e1000) = (err(1), err(1000));
        wins += (e1000 > e1) as usize;
        detail.push(format!("seed {s}: |mu_q - 1.15| K=1 {e1:.3}, K=1000 {e1000:.3}"));
    }
    let mut v = Verdict::from_checks(&[Check::new("k1000_worse_than_k1", wins == 3, format!("{wins}/3 seeds"))]);
    v.detail.extend(detail);
    v
}

fn c10() -> Verdict {
    let mut wins = 0;
    let mut detail = Vec::new();
    for s in 0..3u64 {
        let (_, y) = lgssm_simulate(LgssmParams::new(0.9, 1.0).unwrap(), 200, 100 + s).unwrap();
        let em = em_reference(&y).unwrap();
        let init = Setup::new(
            ModelSpec::Lgssm(LgssmParams::new(0.1, 0.1).unwrap()),
            ProposalSpec::Affine(AffineProposalParams::bootstrap_like(0.1)),
        );
        let run = |objective| {
            let mut cfg = TrainConfig::new(objective, 0.01, 500, s);
            cfg.eval_every = 500;
            cfg.quality = Some(QualityConfig {
                theta_ref: (em.theta_hat.theta1, em.theta_hat.theta2),
                k_eval: 10,
                sampler: ObjectiveKind::Smc,
                reps: 50,
                seed: 9,
            });
            let t = train(&init, &y, &cfg).unwrap();
            assert!(!t.diverged, "{objective:?} diverged: {:?}", t.failure);
            (t.last().proposal_quality.unwrap(), t.last().log_marginal.unwrap())
        };
        let smc1000 = Objective::new(ObjectiveKind::Smc, 1000);
        let (qa, la) = run(TrainObjective::Alternating {
            theta: smc1000,
            phi: Objective::new(ObjectiveKind::Is, 10),
        });
        let (qj, lj) = run(TrainObjective::Single(smc1000));
        wins += (qa <= qj && la >= lj) as usize;
        detail.push(format!("seed {s}: quality ALT {qa:.3} vs joint {qj:.3}; log p ALT {la:.4} vs joint {lj:.4}"));
    }
    let mut v = Verdict::from_checks(&[Check::new("alt_no_worse", wins >= 2, format!("{wins}/3 seeds"))]);
    v.detail.extend(detail);
    v
}

fn c11() -> Verdict {
    Verdict::from_checks(&run_cli(Experiment::InferGrid, &[("seed", int(5))]))
}

fn c12() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_seqelbo");
    let small: [(&str, &[&str]); 8] = [
        ("simulate", &[]),
        ("train", &["--steps", "20", "--eval_every", "5", "--quality_k", "10", "--quality_reps", "5"]),
        ("alt-train", &["--steps", "10", "--len", "50", "--theta_k", "100", "--eval_every", "5"]),
        ("snr", &["--samples", "500"]),
        ("grad-compare", &[]),
        ("kl-check", &[]),
        ("infer-grid", &["--len", "40", "--steps", "20", "--eval_reps", "4", "--train_runs", "2", "--ks_train", "[5, 20]", "--ks_test", "[5, 20]"]),
        ("zhat-check", &["--reps", "2000"]),
    ];
    let root = tempfile::tempdir().unwrap();
    let mut checks = Vec::new();
    for (exp, args) in small {
        let run = |tag: &str| {
            let out = root.path().join(format!("{exp}-{tag}"));
            let o = Command::new(bin).arg(exp).args(args).args(["--seed", "11", "--out"]).arg(&out).output().unwrap();
            assert!(o.status.code().is_some_and(|c| c <= 1), "{exp}: {}", String::from_utf8_lossy(&o.stderr));
            out
        };
        let (a, b) = (run("a"), run("b"));
        let (ma, mb) = (read_manifest(&a), read_manifest(&b));
        let same_bytes = ma
            .outputs
            .iter()
            .all(|o| std::fs::read(a.join(&o.file)).unwrap() == std::fs::read(b.join(&o.file)).unwrap());
        checks.push(Check::new(
            exp,
            !ma.outputs.is_empty() && ma.outputs == mb.outputs && same_bytes,
            format!("{} data files", ma.outputs.len()),
        ));
    }
    Verdict::from_checks(&checks)
}

fn read_manifest(dir: &Path) -> RunManifest {
    RunManifest::read(&dir.join(MANIFEST_NAME)).unwrap()
}
