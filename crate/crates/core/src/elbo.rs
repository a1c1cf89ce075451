//! Evidence lower bounds and their exact extended-space decomposition.
//!
//! `ELBO = E_Q[log Ẑ]` for the VAE (`K = 1` importance sampling), IS and SMC
//! samplers. On discrete HMMs the expectation, the implied target
//! `P = Q Ẑ / Z` and `KL(Q ‖ P)` are computed exactly by enumerating every
//! configuration of the sampler's randomness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DiscreteHmmSpec, DiscreteKernel, DiscreteProposal, IntermediateTargets, Setup};
use crate::oracle::hmm_forward;
use crate::particle::{sweep, Kernel, Sampling, Scheme};
use crate::rng::replicate_rng;
use crate::scalar::log_sum_exp;
use crate::stats::SampleStats;

/// Largest extended space the enumerators will visit.
pub const ENUMERATION_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Vae,
    Is,
    Smc,
}

impl ObjectiveKind {
    pub fn scheme(self) -> Scheme {
        match self {
            ObjectiveKind::Vae | ObjectiveKind::Is => Scheme::Is,
            ObjectiveKind::Smc => Scheme::Smc,
        }
    }

    /// The VAE objective always uses a single sample.
    pub fn particles(self, k: usize) -> usize {
        match self {
            ObjectiveKind::Vae => 1,
            _ => k,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Vae => "vae",
            ObjectiveKind::Is => "is",
            ObjectiveKind::Smc => "smc",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vae" => Ok(ObjectiveKind::Vae),
            "is" => Ok(ObjectiveKind::Is),
            "smc" => Ok(ObjectiveKind::Smc),
            other => Err(Error::InvalidParameter(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub kind: ObjectiveKind,
    pub k: usize,
    pub replicates: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// One draw of `log Ẑ`.
pub fn log_z_sample<M, R>(kernel: &M, kind: ObjectiveKind, k: usize, rng: &mut R) -> Result<f64>
where
    M: Kernel<f64>,
    R: rand::Rng + ?Sized,
{
    let out = sweep(kernel, kind.particles(k), kind.scheme(), Sampling::Reparameterized, false, rng)?;
    Ok(out.log_z)
}

/// `r` draws of `log Ẑ`, replicate `i` on stream `i` of `seed`.
pub fn log_z_samples<M: Kernel<f64>>(
    kernel: &M,
    kind: ObjectiveKind,
    k: usize,
    r: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..r)
        .map(|i| log_z_sample(kernel, kind, k, &mut replicate_rng(seed, i as u64)))
        .collect()
}

pub fn elbo_estimate_with<M: Kernel<f64>>(
    kernel: &M,
    kind: ObjectiveKind,
    k: usize,
    r: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if r == 0 {
        return Err(Error::InvalidParameter("at least one replicate is required".into()));
    }
    let s = SampleStats::from_slice(&log_z_samples(kernel, kind, k, r, seed)?);
    Ok(ElboEstimate {
        kind,
        k: kind.particles(k),
        replicates: r,
        mean: s.mean,
        stderr: s.stderr(),
    })
}

/// Monte Carlo ELBO of a Gaussian setup on one observation sequence.
pub fn elbo_estimate(
    kind: ObjectiveKind,
    setup: &Setup,
    y: &[f64],
    k: usize,
    r: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    elbo_estimate_with(&setup.kernel(y), kind, k, r, seed)
}

/// Mean of per-sequence ELBO estimates; sequence `n` uses `seeds[n]`.
pub fn dataset_objective(
    kind: ObjectiveKind,
    setup: &Setup,
    data: &[Vec<f64>],
    k: usize,
    r: usize,
    seeds: &[u64],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySequence);
    }
    if seeds.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: seeds.len(),
        });
    }
    let mut total = 0.0;
    for (y, &seed) in data.iter().zip(seeds) {
        total += elbo_estimate(kind, setup, y, k, r, seed)?.mean;
    }
    Ok(total / data.len() as f64)
}

/// Exact decomposition of an ELBO on an enumerable instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlGapReport {
    pub log_z_exact: f64,
    pub elbo_exact: f64,
    pub kl_exact: f64,
    /// `elbo_exact - (log_z_exact - kl_exact)`.
    pub residual: f64,
    /// Total mass of the implied target `P`, which is 1 when `Ẑ` is unbiased.
    pub target_mass: f64,
    pub configurations: u64,
}

#[derive(Default)]
struct Accumulator {
    elbo: f64,
    /// `Σ Q log Q`
    neg_entropy: f64,
    /// `Σ Q log P`
    cross: f64,
    mass: f64,
    count: u64,
}

impl Accumulator {
    fn add(&mut self, log_q: f64, log_p: f64, log_z_hat: f64) {
        let q = log_q.exp();
        self.count += 1;
        if q == 0.0 {
            return;
        }
        self.elbo += q * log_z_hat;
        self.neg_entropy += q * log_q;
        self.cross += q * log_p;
        self.mass += log_p.exp();
    }

    fn report(self, log_z: f64) -> KlGapReport {
        let kl = self.neg_entropy - self.cross;
        KlGapReport {
            log_z_exact: log_z,
            elbo_exact: self.elbo,
            kl_exact: kl,
            residual: self.elbo - (log_z - kl),
            target_mass: self.mass,
            configurations: self.count,
        }
    }
}

fn check_budget(size: f64) -> Result<()> {
    if size > ENUMERATION_BUDGET as f64 {
        return Err(Error::SpaceTooLarge {
            size,
            budget: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// Visits every tuple in `0..base` of length `len`, first entry fastest.
fn for_each_tuple(base: usize, len: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; len];
    loop {
        f(&idx);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            idx[i] += 1;
            if idx[i] < base {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Exact `ELBO_IS` and `KL(Q_IS ‖ P_IS)` over all `K`-tuples of trajectories,
/// with `P_IS(x^{1:K}) = 1/K Σ_k p(x^k | y) Π_{l≠k} q(x^l)`.
pub fn enumerate_kl_gap_is(
    spec: &DiscreteHmmSpec,
    proposal: &DiscreteProposal,
    obs: &[f64],
    k: usize,
) -> Result<KlGapReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("at least one particle is required".into()));
    }
    let s = spec.num_states;
    let t_len = spec.horizon;
    check_budget((s as f64).powi((t_len * k) as i32))?;
    // Validates observations and proposal support.
    DiscreteKernel::new(spec, proposal, obs, IntermediateTargets::Filtering)?;
    let y = spec.check_observations(obs)?;
    let log_z = hmm_forward(spec, obs)?.log_marginal;

    let mut log_q = Vec::new();
    let mut log_post = Vec::new();
    for_each_tuple(s, t_len, |path| {
        log_q.push(proposal.log_prob_path(path));
        log_post.push(spec.log_joint_prefix(path, &y) - log_z);
    });
    let n_paths = log_q.len();
    let ln_k = (k as f64).ln();

    let mut acc = Accumulator::default();
    let mut terms = vec![0.0; k];
    for_each_tuple(n_paths, k, |tuple| {
        let lq: f64 = tuple.iter().map(|&i| log_q[i]).sum();
        for (j, &i) in tuple.iter().enumerate() {
            // log w = log p(x, y) - log q(x)
            terms[j] = log_post[i] + log_z - log_q[i];
        }
        let log_z_hat = log_sum_exp(&terms) - ln_k;
        for (j, &i) in tuple.iter().enumerate() {
            terms[j] = lq - log_q[i] + log_post[i];
        }
        let log_p = log_sum_exp(&terms) - ln_k;
        acc.add(lq, log_p, log_z_hat);
    });
    Ok(acc.report(log_z))
}

/// Exact `ELBO_SMC` and `KL(Q_SMC ‖ P_SMC)` over all particle values and
/// ancestor indices, with `P_SMC = Q_SMC Ẑ_SMC / Z`.
pub fn enumerate_kl_gap_smc(
    spec: &DiscreteHmmSpec,
    proposal: &DiscreteProposal,
    obs: &[f64],
    k: usize,
    targets: IntermediateTargets,
) -> Result<KlGapReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("at least one particle is required".into()));
    }
    let s = spec.num_states as f64;
    let t_len = spec.horizon;
    let kf = k as f64;
    check_budget(s.powi((t_len * k) as i32) * kf.powf(kf * (t_len as f64 - 1.0)))?;
    let kernel = DiscreteKernel::new(spec, proposal, obs, targets)?;
    let log_z = hmm_forward(spec, obs)?.log_marginal;

    let mut acc = Accumulator::default();
    let mut e = SmcEnumerator {
        kernel: &kernel,
        k,
        ln_k: kf.ln(),
        log_z,
        acc: &mut acc,
    };
    e.visit(0, &[], &[], 0.0, 0.0);
    Ok(acc.report(log_z))
}

struct SmcEnumerator<'a, 'k> {
    kernel: &'a DiscreteKernel<'k>,
    k: usize,
    ln_k: f64,
    log_z: f64,
    acc: &'a mut Accumulator,
}

impl SmcEnumerator<'_, '_> {
    fn visit(&mut self, t: usize, states: &[usize], logw: &[f64], log_q: f64, log_z_hat: f64) {
        let n = self.kernel.num_states();
        if t == self.kernel.horizon() {
            self.acc.add(log_q, log_q + log_z_hat - self.log_z, log_z_hat);
            return;
        }
        let k = self.k;
        let mut anc_sets: Vec<(Vec<usize>, f64)> = Vec::new();
        if t == 0 {
            anc_sets.push((Vec::new(), 0.0));
        } else if k == 1 {
            anc_sets.push((vec![0], 0.0));
        } else {
            let lse = log_sum_exp(logw);
            for_each_tuple(k, k, |a| {
                let lp: f64 = a.iter().map(|&j| logw[j] - lse).sum();
                if lp > f64::NEG_INFINITY {
                    anc_sets.push((a.to_vec(), lp));
                }
            });
        }
        for (anc, la) in anc_sets {
            let mut children: Vec<(Vec<usize>, Vec<f64>, f64)> = Vec::new();
            for_each_tuple(n, k, |x| {
                let mut lq = 0.0;
                let mut w = Vec::with_capacity(k);
                for j in 0..k {
                    let parent = (t > 0).then(|| states[anc[j]]);
                    let q = self.kernel.proposal_prob(t, parent, x[j]);
                    if q == 0.0 {
                        return;
                    }
                    lq += q.ln();
                    w.push(self.kernel.log_increment(t, parent, x[j]) - q.ln());
                }
                children.push((x.to_vec(), w, lq));
            });
            for (x, w, lq) in children {
                let step = log_sum_exp(&w) - self.ln_k;
                let total_q = log_q + la + lq;
                if step == f64::NEG_INFINITY {
                    // Ẑ = 0 on every continuation, and their Q-mass sums to Q here.
                    self.acc.add(total_q, f64::NEG_INFINITY, f64::NEG_INFINITY);
                    continue;
                }
                self.visit(t + 1, &x, &w, total_q, log_z_hat + step);
            }
        }
    }
}
