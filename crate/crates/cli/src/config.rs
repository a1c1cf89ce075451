//! Experiment configuration.
//!
//! A config is a flat TOML table: one `key = value` per line, no sections.
//! Every experiment has its own set of accepted keys with defaults; values
//! are resolved in the order defaults, file, command-line overrides. The
//! resolved table is what gets echoed into the run manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Train,
    AltTrain,
    Snr,
    GradCompare,
    KlCheck,
    InferGrid,
    ZhatCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Simulate,
        Experiment::Train,
        Experiment::AltTrain,
        Experiment::Snr,
        Experiment::GradCompare,
        Experiment::KlCheck,
        Experiment::InferGrid,
        Experiment::ZhatCheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Train => "train",
            Experiment::AltTrain => "alt-train",
            Experiment::Snr => "snr",
            Experiment::GradCompare => "grad-compare",
            Experiment::KlCheck => "kl-check",
            Experiment::InferGrid => "infer-grid",
            Experiment::ZhatCheck => "zhat-check",
        }
    }

    /// Accepted keys and their defaults, besides `experiment`, `seed` and `out`.
    fn defaults(self) -> Vec<(&'static str, Value)> {
        let data = |len: i64, seed: i64| {
            vec![
                ("data_theta1", Value::Float(0.9)),
                ("data_theta2", Value::Float(1.0)),
                ("len", Value::Integer(len)),
                ("data_seed", Value::Integer(seed)),
            ]
        };
        let kinds = |v: &[&str]| Value::Array(v.iter().map(|s| Value::String(s.to_string())).collect());
        let ints = |v: &[i64]| Value::Array(v.iter().map(|&i| Value::Integer(i)).collect());
        let s = |x: &str| Value::String(x.into());
        let training = |quality_k: i64| {
            vec![
                ("model", s("lgssm")),
                ("x_obs", Value::Float(2.3)),
                ("theta1", Value::Float(0.1)),
                ("theta2", Value::Float(0.1)),
                ("mu_q", Value::Float(0.01)),
                ("log_var_q", Value::Float(0.01)),
                ("lr", Value::Float(0.01)),
                ("steps", Value::Integer(500)),
                ("optimizer", s("sga")),
                ("trainable", s("all")),
                ("eval_every", Value::Integer(1)),
                ("scale_by_length", Value::Boolean(true)),
                ("detach", Value::Boolean(true)),
                ("elbo_reps", Value::Integer(1)),
                ("quality_k", Value::Integer(quality_k)),
                ("quality_reps", Value::Integer(20)),
                ("quality_sampler", s("smc")),
            ]
        };
        let mut d = match self {
            Experiment::Simulate => data(200, 100),
            Experiment::Train => {
                let mut d = data(200, 100);
                d.extend(training(0));
                d.extend([("proposal", s("bootstrap")), ("kind", s("smc")), ("k", Value::Integer(100))]);
                d
            }
            Experiment::AltTrain => {
                let mut d = data(200, 100);
                d.extend(training(10));
                d.extend([
                    ("proposal", s("affine")),
                    ("theta_kind", s("smc")),
                    ("theta_k", Value::Integer(1000)),
                    ("phi_kind", s("is")),
                    ("phi_k", Value::Integer(10)),
                ]);
                d
            }
            Experiment::Snr => {
                let mut d = data(200, 100);
                d.extend([
                    ("model", s("unknown-mean")),
                    ("x_obs", Value::Float(2.3)),
                    ("mu_q", Value::Float(0.01)),
                    ("log_var_q", Value::Float(0.01)),
                    ("theta1", Value::Float(0.9)),
                    ("theta2", Value::Float(1.0)),
                    ("proposal", s("bootstrap")),
                    ("detach", Value::Boolean(false)),
                    ("kind", s("is")),
                    ("estimator", s("reparam")),
                    ("ks", ints(&[1, 10, 100, 1000])),
                    ("samples", Value::Integer(10_000)),
                    ("keep_samples", Value::Boolean(true)),
                    ("check_component", s("mu_q")),
                    ("slope_min", Value::Float(-0.8)),
                    ("slope_max", Value::Float(-0.2)),
                ]);
                d
            }
            Experiment::GradCompare => {
                let mut d = data(200, 1);
                d.extend([
                    ("theta1", Value::Float(0.1)),
                    ("theta2", Value::Float(0.1)),
                    ("proposal", s("bootstrap")),
                    ("detach", Value::Boolean(true)),
                    ("kind", s("smc")),
                    ("k", Value::Integer(16)),
                    ("samples", Value::Integer(100)),
                    ("keep_samples", Value::Boolean(true)),
                    ("check_component", s("theta1")),
                ]);
                d
            }
            Experiment::KlCheck => vec![
                ("k", Value::Integer(2)),
                ("targets", s("filtering")),
                ("random_models", Value::Integer(50)),
                ("tolerance", Value::Float(1e-10)),
            ],
            Experiment::InferGrid => {
                let mut d = data(200, 100);
                d.extend([
                    ("train_kinds", kinds(&["is", "smc"])),
                    ("test_kinds", kinds(&["is", "smc"])),
                    ("ks_train", ints(&[10, 100, 1000])),
                    ("ks_test", ints(&[10, 100, 1000])),
                    ("lr", Value::Float(0.01)),
                    ("steps", Value::Integer(500)),
                    ("optimizer", s("adam")),
                    ("eval_reps", Value::Integer(20)),
                    ("train_runs", Value::Integer(3)),
                ]);
                d
            }
            Experiment::ZhatCheck => {
                let mut d = data(5, 8);
                d.extend([
                    ("k", Value::Integer(10)),
                    ("reps", Value::Integer(100_000)),
                    ("kinds", kinds(&["smc", "is"])),
                    ("z_max", Value::Float(3.0)),
                ]);
                d
            }
        };
        d.push(("seed", Value::Integer(0)));
        d.push(("out", s("out")));
        d
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| anyhow!("unknown experiment `{s}`"))
    }
}

/// Every key any experiment accepts, with its type fixed by deserialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data_theta1: Option<f64>,
    pub data_theta2: Option<f64>,
    pub len: Option<usize>,
    pub data_seed: Option<u64>,
    pub model: Option<String>,
    pub x_obs: Option<f64>,
    pub theta1: Option<f64>,
    pub theta2: Option<f64>,
    pub proposal: Option<String>,
    pub mu_q: Option<f64>,
    pub log_var_q: Option<f64>,
    pub detach: Option<bool>,
    pub kind: Option<String>,
    pub k: Option<usize>,
    pub theta_kind: Option<String>,
    pub theta_k: Option<usize>,
    pub phi_kind: Option<String>,
    pub phi_k: Option<usize>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub optimizer: Option<String>,
    pub trainable: Option<String>,
    pub eval_every: Option<usize>,
    pub scale_by_length: Option<bool>,
    pub elbo_reps: Option<usize>,
    pub quality_k: Option<usize>,
    pub quality_reps: Option<usize>,
    pub quality_sampler: Option<String>,
    pub estimator: Option<String>,
    pub ks: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub keep_samples: Option<bool>,
    pub check_component: Option<String>,
    pub slope_min: Option<f64>,
    pub slope_max: Option<f64>,
    pub targets: Option<String>,
    pub random_models: Option<usize>,
    pub tolerance: Option<f64>,
    pub train_kinds: Option<Vec<String>>,
    pub test_kinds: Option<Vec<String>>,
    pub ks_train: Option<Vec<usize>>,
    pub ks_test: Option<Vec<usize>>,
    pub eval_reps: Option<usize>,
    pub train_runs: Option<usize>,
    pub reps: Option<usize>,
    pub kinds: Option<Vec<String>>,
    pub z_max: Option<f64>,
}

/// A config with every accepted key filled in, plus the table it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub experiment: Experiment,
    pub values: ExperimentConfig,
    /// The merged table, for the manifest echo.
    pub table: Table,
}

impl Resolved {
    pub fn seed(&self) -> u64 {
        self.values.seed.expect("defaulted")
    }

    pub fn out_dir(&self) -> &Path {
        self.values.out.as_deref().expect("defaulted")
    }
}

/// Parses one `key=value` override. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise, so `kind=smc` and
/// `ks=[1,10]` both work.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{s}` is not of the form key=value"))?;
    let key = key.trim().replace('-', "_");
    if key.is_empty() {
        bail!("override `{s}` has an empty key");
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Merges defaults, the optional file and the overrides, then validates.
///
/// `experiment` comes from the command line; a file that names a different
/// experiment is rejected.
pub fn resolve(
    experiment: Experiment,
    file: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<Resolved> {
    let file_table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    resolve_tables(experiment, file_table, overrides)
}

pub fn resolve_tables(experiment: Experiment, file: Table, overrides: &[(String, Value)]) -> Result<Resolved> {
    let defaults = experiment.defaults();
    let accepted: BTreeSet<&str> = defaults.iter().map(|(k, _)| *k).chain(["experiment"]).collect();
    let mut table: Table = defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect();

    let provided = file.into_iter().chain(overrides.iter().cloned());
    for (key, value) in provided {
        if value.is_table() {
            bail!("key `{key}`: sections are not supported; configs are flat key = value files");
        }
        if !accepted.contains(key.as_str()) {
            // Distinguish a typo from a key that belongs to another experiment.
            let known = Experiment::ALL
                .iter()
                .any(|e| e.defaults().iter().any(|(k, _)| *k == key));
            if known {
                bail!("key `{key}` does not apply to experiment `{experiment}`");
            }
            bail!("unknown key `{key}`");
        }
        table.insert(key, value);
    }
    match table.get("experiment") {
        None => {
            table.insert("experiment".into(), Value::String(experiment.as_str().into()));
        }
        Some(Value::String(s)) if s == experiment.as_str() => {}
        Some(other) => bail!("key `experiment`: config names {other} but `{experiment}` was requested"),
    }

    let values: ExperimentConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.to_string().trim_end()))?;
    let resolved = Resolved {
        experiment,
        values,
        table,
    };
    validate(&resolved)?;
    Ok(resolved)
}

fn validate(r: &Resolved) -> Result<()> {
    let v = &r.values;
    let positive = [
        ("len", v.len),
        ("k", v.k),
        ("theta_k", v.theta_k),
        ("phi_k", v.phi_k),
        ("steps", v.steps),
        ("eval_every", v.eval_every),
        ("elbo_reps", v.elbo_reps),
        ("quality_reps", v.quality_reps),
        ("samples", v.samples),
        ("eval_reps", v.eval_reps),
        ("train_runs", v.train_runs),
        ("reps", v.reps),
    ];
    for (key, value) in positive {
        if value == Some(0) {
            bail!("key `{key}` must be at least 1");
        }
    }
    if let Some(lr) = v.lr {
        if !(lr >= 0.0 && lr.is_finite()) {
            bail!("key `lr` must be finite and non-negative");
        }
    }
    for (key, list) in [("ks", &v.ks), ("ks_train", &v.ks_train), ("ks_test", &v.ks_test)] {
        if let Some(l) = list {
            if l.is_empty() || l.contains(&0) {
                bail!("key `{key}` must be a non-empty list of positive integers");
            }
        }
    }
    if let Some(len) = v.len {
        if r.experiment == Experiment::InferGrid && len < 2 {
            bail!("key `len` must be at least 2 for the EM reference fit");
        }
    }
    Ok(())
}
