//! Exact inference for the in-scope models.
//!
//! Kalman filtering and RTS smoothing for the linear-Gaussian models, EM for
//! `(theta1, theta2)` of the LGSSM, the conjugate posterior of the
//! unknown-mean model, and forward/backward recursions for discrete HMMs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    gaussian_logpdf, normal_logpdf_fixed, DiscreteHmmSpec, DiscreteProposal, Gaussian1D,
    LgssmParams, LinearGaussianSsm,
};
use crate::scalar::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanResult {
    pub predicted_means: Vec<f64>,
    pub predicted_vars: Vec<f64>,
    pub filtered_means: Vec<f64>,
    pub filtered_vars: Vec<f64>,
    pub smoothed_means: Vec<f64>,
    pub smoothed_vars: Vec<f64>,
    /// `Cov(x_t, x_{t+1} | y_{1:T})`, length `T - 1`.
    pub cross_covs: Vec<f64>,
    pub log_marginal_likelihood: f64,
}

pub fn kalman_filter_smoother(model: &LinearGaussianSsm, y: &[f64]) -> Result<KalmanResult> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observations"));
    }
    let (a, c) = (model.theta1, model.theta2);
    let (q, r) = (model.trans_var, model.obs_var);

    let mut mp = Vec::with_capacity(n);
    let mut pp = Vec::with_capacity(n);
    let mut mf = Vec::with_capacity(n);
    let mut pf = Vec::with_capacity(n);
    let mut ll = 0.0;
    let (mut m, mut p) = (0.0, model.init_var);
    for &yt in y {
        mp.push(m);
        pp.push(p);
        let s = c * c * p + r;
        ll += normal_logpdf_fixed(yt, c * m, s);
        let gain = p * c / s;
        m += gain * (yt - c * m);
        p = p * r / s;
        mf.push(m);
        pf.push(p);
        m *= a;
        p = a * a * p + q;
    }

    let mut ms = mf.clone();
    let mut ps = pf.clone();
    let mut cross = vec![0.0; n - 1];
    for t in (0..n - 1).rev() {
        let j = pf[t] * a / pp[t + 1];
        ms[t] = mf[t] + j * (ms[t + 1] - mp[t + 1]);
        ps[t] = pf[t] + j * j * (ps[t + 1] - pp[t + 1]);
        cross[t] = j * ps[t + 1];
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("Kalman log marginal likelihood"));
    }
    Ok(KalmanResult {
        predicted_means: mp,
        predicted_vars: pp,
        filtered_means: mf,
        filtered_vars: pf,
        smoothed_means: ms,
        smoothed_vars: ps,
        cross_covs: cross,
        log_marginal_likelihood: ll,
    })
}

/// `log p_θ(y_{1:T})` of the LGSSM.
pub fn lgssm_log_marginal(params: LgssmParams, y: &[f64]) -> Result<f64> {
    Ok(kalman_filter_smoother(&LinearGaussianSsm::lgssm(params), y)?.log_marginal_likelihood)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub theta_hat: LgssmParams,
    pub log_marginal_at_optimum: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Exact log marginal at the initial point and after every M-step.
    pub trace: Vec<f64>,
}

pub const EM_DEFAULT_TOL: f64 = 1e-8;
pub const EM_DEFAULT_MAX_ITERS: usize = 500;

/// Maximum-likelihood `(theta1, theta2)` of the LGSSM by EM, with the noise
/// variances held at their model values.
pub fn em_fit(y: &[f64], init: LgssmParams, max_iters: usize, tol: f64) -> Result<EmResult> {
    if y.len() < 2 {
        return Err(Error::InvalidParameter("EM needs at least two observations".into()));
    }
    let mut theta = init;
    let mut k = kalman_filter_smoother(&LinearGaussianSsm::lgssm(theta), y)?;
    let mut trace = vec![k.log_marginal_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let second: Vec<f64> = k
            .smoothed_means
            .iter()
            .zip(&k.smoothed_vars)
            .map(|(m, v)| m * m + v)
            .collect();
        let n = y.len();
        let lag: f64 = (0..n - 1)
            .map(|t| k.cross_covs[t] + k.smoothed_means[t] * k.smoothed_means[t + 1])
            .sum();
        let theta1 = lag / second[..n - 1].iter().sum::<f64>();
        let theta2 = y.iter().zip(&k.smoothed_means).map(|(a, b)| a * b).sum::<f64>()
            / second.iter().sum::<f64>();
        theta = LgssmParams::new(theta1, theta2)?;
        let prev = k.log_marginal_likelihood;
        k = kalman_filter_smoother(&LinearGaussianSsm::lgssm(theta), y)?;
        trace.push(k.log_marginal_likelihood);
        if k.log_marginal_likelihood - prev < tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        theta_hat: theta,
        log_marginal_at_optimum: k.log_marginal_likelihood,
        iterations,
        converged,
        trace,
    })
}

/// Posterior of `μ` under `μ ~ N(0, 1)`, `x | μ ~ N(μ, 1)`.
pub fn conjugate_posterior_unknown_mean(x_obs: f64) -> Gaussian1D {
    Gaussian1D {
        mean: x_obs / 2.0,
        std: 0.5f64.sqrt(),
    }
}

/// `log p(x_obs) = log N(x_obs; 0, 2)` for the unknown-mean model.
pub fn unknown_mean_log_marginal(x_obs: f64) -> Result<f64> {
    gaussian_logpdf(x_obs, &Gaussian1D::new(0.0, 2f64.sqrt())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmForward {
    pub log_marginal: f64,
    /// `p(x_t | y_{1:t})`.
    pub filtered: Vec<Vec<f64>>,
    /// `log Z_t = log p(y_{1:t})` for every `t`.
    pub log_normalizers: Vec<f64>,
}

/// Scaled forward recursion.
pub fn hmm_forward(spec: &DiscreteHmmSpec, obs: &[f64]) -> Result<HmmForward> {
    let y = spec.check_observations(obs)?;
    let n = spec.num_states;
    let mut filtered = Vec::with_capacity(y.len());
    let mut log_normalizers = Vec::with_capacity(y.len());
    let mut log_z = 0.0;
    let mut prev: Vec<f64> = Vec::new();
    for (t, &s) in y.iter().enumerate() {
        let mut alpha: Vec<f64> = (0..n)
            .map(|j| {
                let pred = if t == 0 {
                    spec.initial[j]
                } else {
                    (0..n).map(|i| prev[i] * spec.transition[i][j]).sum()
                };
                pred * spec.emission[j][s]
            })
            .collect();
        let c: f64 = alpha.iter().sum();
        log_z += c.ln();
        log_normalizers.push(log_z);
        if c > 0.0 {
            alpha.iter_mut().for_each(|a| *a /= c);
        }
        filtered.push(alpha.clone());
        prev = alpha;
    }
    Ok(HmmForward {
        log_marginal: log_z,
        filtered,
        log_normalizers,
    })
}

/// `log β_t(x) = log p(y_{t+1:T} | x_t = x)`, indexed `[t][x]`; the last row is zero.
pub fn hmm_log_backward(spec: &DiscreteHmmSpec, symbols: &[usize]) -> Vec<Vec<f64>> {
    let n = spec.num_states;
    let len = symbols.len();
    let mut out = vec![vec![0.0; n]; len];
    for t in (0..len.saturating_sub(1)).rev() {
        for i in 0..n {
            let terms: Vec<f64> = (0..n)
                .map(|j| {
                    spec.transition[i][j].ln()
                        + spec.emission[j][symbols[t + 1]].ln()
                        + out[t + 1][j]
                })
                .collect();
            out[t][i] = log_sum_exp(&terms);
        }
    }
    out
}

/// The exact posterior `p(x_{1:T} | y_{1:T})` as a Markov proposal.
///
/// Rows conditioned on an impossible parent are set to the prior transition row.
pub fn hmm_posterior_proposal(spec: &DiscreteHmmSpec, obs: &[f64]) -> Result<DiscreteProposal> {
    let y = spec.check_observations(obs)?;
    let beta = hmm_log_backward(spec, &y);
    let n = spec.num_states;
    let normalize = |logs: Vec<f64>| -> Option<Vec<f64>> {
        let lse = log_sum_exp(&logs);
        (lse > f64::NEG_INFINITY).then(|| logs.iter().map(|l| (l - lse).exp()).collect())
    };
    let initial = normalize(
        (0..n)
            .map(|x| spec.initial[x].ln() + spec.emission[x][y[0]].ln() + beta[0][x])
            .collect(),
    )
    .ok_or(Error::DegenerateWeights)?;
    let transitions = (1..spec.horizon)
        .map(|t| {
            (0..n)
                .map(|i| {
                    normalize(
                        (0..n)
                            .map(|j| {
                                spec.transition[i][j].ln()
                                    + spec.emission[j][y[t]].ln()
                                    + beta[t][j]
                            })
                            .collect(),
                    )
                    .unwrap_or_else(|| spec.transition[i].clone())
                })
                .collect()
        })
        .collect();
    Ok(DiscreteProposal {
        initial,
        transitions,
    })
}
