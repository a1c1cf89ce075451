//! Gradient estimators for the VAE, IS and SMC lower bounds.
//!
//! All three estimators run the same sweep over [`Dual`] scalars:
//!
//! * [`GradientEstimator::Reparam`] differentiates `log Ẑ` through the
//!   reparameterized latent draws and drops the score of the ancestor draws.
//!   This is the training default. It is biased for SMC with `K > 1`, `T > 1`.
//! * [`GradientEstimator::ReinforceReparam`] adds
//!   `∇ log P(ancestors) · log Ẑ`, which makes it unbiased.
//! * [`GradientEstimator::ReinforceFull`] treats the latent draws as constants
//!   too: `(∇ log P(ancestors) + ∇ log Q(latents)) · log Ẑ + ∇ log Ẑ`.

use serde::{Deserialize, Serialize};

use crate::elbo::{log_z_sample, ObjectiveKind};
use crate::error::{Error, Result};
use crate::models::Setup;
use crate::params::{ParamMask, ParamVector};
use crate::particle::{sweep, Sampling};
use crate::rng::{derive_seed, replicate_rng};
use crate::scalar::{Dual, Scalar};
use crate::stats::SampleStats;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientEstimator {
    Reparam,
    ReinforceReparam,
    ReinforceFull,
}

impl GradientEstimator {
    pub const ALL: [GradientEstimator; 3] = [
        GradientEstimator::Reparam,
        GradientEstimator::ReinforceReparam,
        GradientEstimator::ReinforceFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradientEstimator::Reparam => "reparam",
            GradientEstimator::ReinforceReparam => "reinforce-reparam",
            GradientEstimator::ReinforceFull => "reinforce-full",
        }
    }
}

impl std::fmt::Display for GradientEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GradientEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradientEstimator::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown gradient estimator `{s}`")))
    }
}

/// One gradient sample of `log Ẑ` with respect to `setup.params()`, plus the
/// sampled `log Ẑ` value.
pub fn grad_sample<R: rand::Rng + ?Sized>(
    estimator: GradientEstimator,
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let layout = setup.params();
    let vars: Vec<Dual> = layout
        .values()
        .into_iter()
        .enumerate()
        .map(|(i, v)| Dual::variable(v, i))
        .collect();
    let kernel = setup.lift(y, &vars);
    let sampling = match estimator {
        GradientEstimator::ReinforceFull => Sampling::Score,
        _ => Sampling::Reparameterized,
    };
    let out = sweep(&kernel, kind.particles(k), kind.scheme(), sampling, false, rng)?;
    let log_z = out.log_z.value();
    let n = layout.len();
    let mut g = out.log_z.d[..n].to_vec();
    let score = match estimator {
        GradientEstimator::Reparam => None,
        GradientEstimator::ReinforceReparam => Some(out.ancestor_log_prob),
        GradientEstimator::ReinforceFull => Some(out.ancestor_log_prob + out.proposal_log_prob),
    };
    if let Some(s) = score {
        for (gi, si) in g.iter_mut().zip(&s.d[..n]) {
            *gi += si * log_z;
        }
    }
    Ok((g, log_z))
}

fn as_params(setup: &Setup, g: Vec<f64>) -> Result<ParamVector> {
    setup.params().with_values(&g)
}

/// Reparameterized gradient with the ancestor score dropped.
///
/// `detach_model_in_proposal` overrides the flag stored in `setup`.
pub fn grad_reparam<R: rand::Rng + ?Sized>(
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    rng: &mut R,
    detach_model_in_proposal: bool,
) -> Result<ParamVector> {
    let s = setup.detached(detach_model_in_proposal);
    let (g, _) = grad_sample(GradientEstimator::Reparam, kind, &s, y, k, rng)?;
    as_params(setup, g)
}

/// Reparameterized gradient plus the ancestor score term.
pub fn grad_reinforce_reparam<R: rand::Rng + ?Sized>(
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    let (g, _) = grad_sample(GradientEstimator::ReinforceReparam, kind, setup, y, k, rng)?;
    as_params(setup, g)
}

/// Score-function gradient over the whole sampling distribution.
pub fn grad_reinforce_full<R: rand::Rng + ?Sized>(
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    let (g, _) = grad_sample(GradientEstimator::ReinforceFull, kind, setup, y, k, rng)?;
    as_params(setup, g)
}

/// Central differences of `f` at `at` along every component selected by `mask`;
/// other components are zero. `f` is responsible for using common random
/// numbers across its evaluations.
pub fn finite_difference<F>(f: F, at: &ParamVector, h: f64, mask: ParamMask) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let base = at.values();
    let mut out = vec![0.0; base.len()];
    for (i, p) in at.entries().iter().enumerate() {
        if !mask.includes(p.group) {
            continue;
        }
        let mut v = base.clone();
        v[i] = base[i] + h;
        let plus = f(&at.with_values(&v)?)?;
        v[i] = base[i] - h;
        let minus = f(&at.with_values(&v)?)?;
        out[i] = (plus - minus) / (2.0 * h);
    }
    at.with_values(&out)
}

/// Per-component summary of gradient samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub names: Vec<String>,
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `|mean| / std`, `None` when `std = 0`.
    pub snr: Vec<Option<f64>>,
    /// Raw samples `[sample][component]`, when retained.
    pub samples: Option<Vec<Vec<f64>>>,
}

impl GradStats {
    pub fn from_samples(names: Vec<String>, samples: Vec<Vec<f64>>, keep: bool) -> Self {
        let dim = names.len();
        let n = samples.len();
        let mut mean = Vec::with_capacity(dim);
        let mut std = Vec::with_capacity(dim);
        let mut snr = Vec::with_capacity(dim);
        for c in 0..dim {
            let col: Vec<f64> = samples.iter().map(|s| s[c]).collect();
            let s = SampleStats::from_slice(&col);
            mean.push(s.mean);
            std.push(s.std());
            snr.push((s.std() > 0.0).then(|| s.mean.abs() / s.std()));
        }
        GradStats {
            names,
            n,
            mean,
            std,
            snr,
            samples: keep.then_some(samples),
        }
    }

    pub fn stderr(&self, c: usize) -> f64 {
        self.std[c] / (self.n as f64).sqrt()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn component(&self, c: usize) -> SampleStats {
        SampleStats {
            n: self.n,
            mean: self.mean[c],
            variance: self.std[c] * self.std[c],
        }
    }
}

fn masked_names(setup: &Setup, mask: ParamMask) -> (Vec<usize>, Vec<String>) {
    setup
        .params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, p)| mask.includes(p.group))
        .map(|(i, p)| (i, p.name.clone()))
        .unzip()
}

/// `n` i.i.d. gradient samples (sample `i` on stream `i` of `seed`),
/// restricted to the components selected by `mask`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_samples(
    estimator: GradientEstimator,
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    mask: ParamMask,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (idx, _) = masked_names(setup, mask);
    (0..n)
        .map(|i| {
            let (g, _) = grad_sample(estimator, kind, setup, y, k, &mut replicate_rng(seed, i as u64))?;
            Ok(idx.iter().map(|&j| g[j]).collect())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn gradient_stats(
    estimator: GradientEstimator,
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    mask: ParamMask,
    n: usize,
    seed: u64,
    keep_samples: bool,
) -> Result<GradStats> {
    let (_, names) = masked_names(setup, mask);
    let samples = gradient_samples(estimator, kind, setup, y, k, mask, n, seed)?;
    Ok(GradStats::from_samples(names, samples, keep_samples))
}

/// Per-replicate central differences of `log Ẑ` with common random numbers:
/// replicate `i` evaluates `log Ẑ(p ± h e_c)` on stream `i` of `seed`. The
/// mean is the finite difference of the Monte Carlo ELBO.
#[allow(clippy::too_many_arguments)]
pub fn fd_elbo_stats(
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    mask: ParamMask,
    r: usize,
    seed: u64,
    h: f64,
) -> Result<GradStats> {
    let (idx, names) = masked_names(setup, mask);
    let base = setup.params();
    let shifted = |c: usize, sign: f64| -> Result<Setup> {
        let mut v = base.values();
        v[c] += sign * h;
        setup.with_params(&base.with_values(&v)?)
    };
    let pairs: Vec<(Setup, Setup)> = idx
        .iter()
        .map(|&c| Ok((shifted(c, 1.0)?, shifted(c, -1.0)?)))
        .collect::<Result<_>>()?;
    let samples = (0..r)
        .map(|i| {
            pairs
                .iter()
                .map(|(plus, minus)| {
                    let a = log_z_sample(&plus.kernel(y), kind, k, &mut replicate_rng(seed, i as u64))?;
                    let b = log_z_sample(&minus.kernel(y), kind, k, &mut replicate_rng(seed, i as u64))?;
                    Ok((a - b) / (2.0 * h))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradStats::from_samples(names, samples, false))
}

/// Gradient statistics at each particle count; count `K` draws from the
/// seed family `derive_seed(seed, K)`.
#[allow(clippy::too_many_arguments)]
pub fn snr_profile(
    estimator: GradientEstimator,
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    mask: ParamMask,
    ks: &[usize],
    n: usize,
    seed: u64,
    keep_samples: bool,
) -> Result<Vec<(usize, GradStats)>> {
    if n < 100 {
        return Err(Error::InvalidParameter("SNR profiles need at least 100 samples".into()));
    }
    ks.iter()
        .map(|&k| {
            let s = gradient_stats(
                estimator,
                kind,
                setup,
                y,
                k,
                mask,
                n,
                derive_seed(seed, k as u64),
                keep_samples,
            )?;
            Ok((k, s))
        })
        .collect()
}
