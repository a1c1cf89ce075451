//! Importance sampling and sequential Monte Carlo sweeps.
//!
//! Both samplers run on a [`Kernel`], which proposes one latent step and
//! returns its log-proposal density and log incremental weight. SMC resamples
//! multinomially at every step `t >= 2`; importance sampling never resamples
//! and weights whole trajectories.
//!
//! Indices are 0-based: step `t` here is step `t + 1` of the usual 1-based
//! notation, and ancestor indices lie in `0..K`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// How latent draws depend on the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `x = r(eps; params)`, so derivatives flow through the sampled values.
    Reparameterized,
    /// Sampled values are constants; the proposal log-density carries the
    /// parameter dependence instead.
    Score,
}

/// Output of one proposal step.
#[derive(Debug, Clone, Copy)]
pub struct Step<S, X> {
    pub state: X,
    /// Real-valued record of `state`.
    pub value: f64,
    /// Auxiliary noise consumed by the draw.
    pub noise: f64,
    pub log_q: S,
    /// `log γ_t(x_{1:t}) - log γ_{t-1}(x_{1:t-1}) - log q_t(x_t | ...)`.
    pub log_w: S,
}

/// A Markov model/proposal pair seen one step at a time.
pub trait Kernel<S: Scalar> {
    type State: Copy;

    fn horizon(&self) -> usize;

    /// Proposes `x_t` given the parent state (`None` at `t = 0`).
    fn step<R: Rng + ?Sized>(
        &self,
        t: usize,
        parent: Option<Self::State>,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Step<S, Self::State>>;
}

/// Resampling scheme of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Is,
    Smc,
}

/// `exp(logw - logsumexp(logw))`.
pub fn normalize_log_weights(logw: &[f64]) -> Result<Vec<f64>> {
    if logw.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::NonFinite("log-weights"));
    }
    let lse = log_sum_exp(logw);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    Ok(logw.iter().map(|w| (w - lse).exp()).collect())
}

/// Draws `k` i.i.d. ancestor indices from `wbar` by inverse CDF.
///
/// The index returned for a uniform `u` is the first `j` with
/// `cumsum(wbar)[j] > u`, so ties go to the lower index.
pub fn resample_multinomial<R: Rng + ?Sized>(wbar: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    resample_into(wbar, k, rng, &mut Vec::new(), &mut out);
    out
}

fn resample_into<R: Rng + ?Sized>(
    wbar: &[f64],
    k: usize,
    rng: &mut R,
    cdf: &mut Vec<f64>,
    out: &mut Vec<usize>,
) {
    cdf.clear();
    let mut acc = 0.0;
    for w in wbar {
        acc += w;
        cdf.push(acc);
    }
    let last = wbar.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    out.clear();
    for _ in 0..k {
        let u: f64 = rng.random();
        let j = cdf.partition_point(|&c| c <= u);
        out.push(j.min(last));
    }
}

/// Full record of one SMC sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleGenealogy {
    /// `values[t][k]`, the value proposed for particle `k` at step `t`.
    pub values: Vec<Vec<f64>>,
    /// `ancestors[t][k]`: the step-`t` particle that step-`t+1` particle `k`
    /// descends from. Length `T - 1`.
    pub ancestors: Vec<Vec<usize>>,
    pub log_weights: Vec<Vec<f64>>,
    /// `log(1/K Σ_k w_t^k)` per step.
    pub log_mean_weights: Vec<f64>,
    pub log_z_hat: f64,
    /// Auxiliary noises `ε_t^k`.
    pub noises: Vec<Vec<f64>>,
}

impl ParticleGenealogy {
    pub fn num_particles(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    /// `Σ_t log mean-weight`, recomputed from the stored log-weights.
    pub fn recompute_log_z(&self) -> f64 {
        let k = self.num_particles() as f64;
        self.log_weights
            .iter()
            .map(|w| log_sum_exp(w) - k.ln())
            .sum()
    }

    /// Surviving trajectories `x̃_{1:T}^k`, indexed `[k][t]`.
    pub fn trajectories(&self) -> Vec<Vec<f64>> {
        let t_len = self.horizon();
        let k = self.num_particles();
        (0..k)
            .map(|j| {
                let mut path = vec![0.0; t_len];
                let mut idx = j;
                for t in (0..t_len).rev() {
                    path[t] = self.values[t][idx];
                    if t > 0 {
                        idx = self.ancestors[t - 1][idx];
                    }
                }
                path
            })
            .collect()
    }

    pub fn final_weights(&self) -> Result<Vec<f64>> {
        normalize_log_weights(self.log_weights.last().ok_or(Error::EmptySequence)?)
    }

    /// `Σ_k w̄_T^k x̃_t^k` for every `t`.
    pub fn marginal_means(&self) -> Result<Vec<f64>> {
        let w = self.final_weights()?;
        Ok(weighted_path_means(&self.trajectories(), &w))
    }
}

fn weighted_path_means(paths: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let t_len = paths.first().map_or(0, Vec::len);
    (0..t_len)
        .map(|t| paths.iter().zip(w).map(|(p, wk)| wk * p[t]).sum())
        .collect()
}

/// `K` independent weighted trajectories from the sequential proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsBatch {
    /// `trajectories[k][t]`.
    pub trajectories: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub log_z_hat: f64,
    pub noises: Vec<Vec<f64>>,
}

impl IsBatch {
    pub fn marginal_means(&self) -> Result<Vec<f64>> {
        let w = normalize_log_weights(&self.log_weights)?;
        Ok(weighted_path_means(&self.trajectories, &w))
    }
}

/// Result of a sweep over scalar `S`.
#[derive(Debug, Clone)]
pub struct SweepOutput<S> {
    /// `log Ẑ`.
    pub log_z: S,
    /// `Σ_{t,k} log w̄_{t-1}^{a_{t-1}^k}`, the log-probability of the ancestor draws.
    pub ancestor_log_prob: S,
    /// `Σ_{t,k} log q_t(x_t^k | ...)`, the log-probability of the latent draws.
    pub proposal_log_prob: S,
    pub genealogy: Option<ParticleGenealogy>,
}

/// Runs one IS or SMC sweep with `k` particles.
///
/// Random numbers are consumed step-major: at each step the `k` ancestor
/// uniforms (SMC, `t >= 1`, `k > 1`) and then the `k` latent noises. With
/// `k = 1` resampling is a no-op and draws nothing, so IS and SMC consume
/// identical streams.
pub fn sweep<S, M, R>(
    kernel: &M,
    k: usize,
    scheme: Scheme,
    sampling: Sampling,
    record: bool,
    rng: &mut R,
) -> Result<SweepOutput<S>>
where
    S: Scalar,
    M: Kernel<S>,
    R: Rng + ?Sized,
{
    let t_len = kernel.horizon();
    if t_len == 0 {
        return Err(Error::EmptySequence);
    }
    if k == 0 {
        return Err(Error::InvalidParameter("at least one particle is required".into()));
    }
    let ln_k = (k as f64).ln();

    let mut states: Vec<M::State> = Vec::with_capacity(k);
    let mut next: Vec<M::State> = Vec::with_capacity(k);
    let mut logw: Vec<S> = Vec::with_capacity(k);
    let mut cum: Vec<S> = vec![S::constant(0.0); if scheme == Scheme::Is { k } else { 0 }];
    let mut lse_prev = S::constant(0.0);
    let mut wbar: Vec<f64> = Vec::with_capacity(k);
    let mut cdf = Vec::with_capacity(k);
    let mut anc: Vec<usize> = Vec::with_capacity(k);

    let mut log_z = S::constant(0.0);
    let mut ancestor_log_prob = S::constant(0.0);
    let mut proposal_log_prob = S::constant(0.0);

    let mut gen = record.then(|| ParticleGenealogy {
        values: Vec::with_capacity(t_len),
        ancestors: Vec::with_capacity(t_len.saturating_sub(1)),
        log_weights: Vec::with_capacity(t_len),
        log_mean_weights: Vec::with_capacity(t_len),
        log_z_hat: 0.0,
        noises: Vec::with_capacity(t_len),
    });

    for t in 0..t_len {
        anc.clear();
        if t > 0 {
            match scheme {
                Scheme::Smc if k > 1 => {
                    wbar.clear();
                    wbar.extend(logw.iter().map(|w| (w.value() - lse_prev.value()).exp()));
                    resample_into(&wbar, k, rng, &mut cdf, &mut anc);
                    for &a in &anc {
                        ancestor_log_prob += logw[a] - lse_prev;
                    }
                }
                _ => anc.extend(0..k),
            }
        }

        next.clear();
        logw.clear();
        let mut vals = Vec::new();
        let mut noise = Vec::new();
        if record {
            vals.reserve(k);
            noise.reserve(k);
        }
        for j in 0..k {
            let parent = if t == 0 { None } else { Some(states[anc[j]]) };
            let s = kernel.step(t, parent, sampling, rng)?;
            let lw = s.log_w.value();
            if lw.is_nan() || lw == f64::INFINITY {
                return Err(Error::NonFinite("incremental log-weight"));
            }
            next.push(s.state);
            logw.push(s.log_w);
            proposal_log_prob += s.log_q;
            if record {
                vals.push(s.value);
                noise.push(s.noise);
            }
        }
        std::mem::swap(&mut states, &mut next);

        match scheme {
            Scheme::Smc => {
                let lse = log_sum_exp(&logw);
                if lse.value() == f64::NEG_INFINITY {
                    return Err(Error::DegenerateAt { step: t });
                }
                log_z += lse - ln_k;
                lse_prev = lse;
                if let Some(g) = gen.as_mut() {
                    g.log_mean_weights.push(lse.value() - ln_k);
                }
            }
            Scheme::Is => {
                for (c, w) in cum.iter_mut().zip(&logw) {
                    *c += *w;
                }
            }
        }
        if let Some(g) = gen.as_mut() {
            g.values.push(vals);
            g.noises.push(noise);
            g.log_weights.push(logw.iter().map(|w| w.value()).collect());
            if t > 0 {
                g.ancestors.push(anc.clone());
            }
        }
    }

    if scheme == Scheme::Is {
        let lse = log_sum_exp(&cum);
        if lse.value() == f64::NEG_INFINITY {
            return Err(Error::DegenerateAt { step: t_len - 1 });
        }
        log_z = lse - ln_k;
        if let Some(g) = gen.as_mut() {
            // Trajectory weights replace the per-step increments at the last step.
            *g.log_weights.last_mut().expect("non-empty") =
                cum.iter().map(|w| w.value()).collect();
        }
    }
    if let Some(g) = gen.as_mut() {
        g.log_z_hat = log_z.value();
    }
    Ok(SweepOutput {
        log_z,
        ancestor_log_prob,
        proposal_log_prob,
        genealogy: gen,
    })
}

/// One SMC sweep with the full genealogy recorded.
pub fn smc_sweep<M: Kernel<f64>, R: Rng + ?Sized>(
    kernel: &M,
    k: usize,
    rng: &mut R,
) -> Result<ParticleGenealogy> {
    let out = sweep(kernel, k, Scheme::Smc, Sampling::Reparameterized, true, rng)?;
    Ok(out.genealogy.expect("recorded"))
}

/// `K` independent trajectories weighted by joint over proposal density.
pub fn is_batch<M: Kernel<f64>, R: Rng + ?Sized>(kernel: &M, k: usize, rng: &mut R) -> Result<IsBatch> {
    let out = sweep(kernel, k, Scheme::Is, Sampling::Reparameterized, true, rng)?;
    let g = out.genealogy.expect("recorded");
    let t_len = g.values.len();
    let trajectories = (0..k)
        .map(|j| (0..t_len).map(|t| g.values[t][j]).collect())
        .collect();
    let noises = (0..k)
        .map(|j| (0..t_len).map(|t| g.noises[t][j]).collect())
        .collect();
    Ok(IsBatch {
        trajectories,
        log_weights: g.log_weights[t_len - 1].clone(),
        log_z_hat: g.log_z_hat,
        noises,
    })
}

/// Self-normalized estimate `Σ_k w̄_T^k φ(x̃_{1:T}^k)` from per-trajectory
/// test-function values.
pub fn posterior_functional(gen: &ParticleGenealogy, phi: &[f64]) -> Result<f64> {
    let w = gen.final_weights()?;
    if phi.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: phi.len(),
        });
    }
    Ok(w.iter().zip(phi).map(|(a, b)| a * b).sum())
}
