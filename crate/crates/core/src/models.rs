//! Gaussian densities, the model families and their proposal families.
//!
//! Three families are provided:
//!
//! * the scalar linear-Gaussian state-space model with transition coefficient
//!   `theta1` and emission coefficient `theta2`, unit transition variance and
//!   emission variance 0.1;
//! * the Gaussian unknown-mean model `μ ~ N(0, 1)`, `x | μ ~ N(μ, 1)`, which
//!   is the same linear-Gaussian machinery with a single step;
//! * small discrete hidden Markov models used as exact-enumeration testbeds.
//!
//! Continuous models are combined with a proposal into a [`Setup`], which
//! knows its own parameter layout and can be lifted onto any [`Scalar`] for
//! differentiation.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamVector};
use crate::particle::{Kernel, Sampling, Step};
use crate::rng::replicate_rng;
use crate::scalar::Scalar;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Transition variance of the linear-Gaussian model.
pub const LGSSM_TRANSITION_VAR: f64 = 1.0;
/// Emission variance of the linear-Gaussian model.
pub const LGSSM_OBSERVATION_VAR: f64 = 0.1;
/// Variance of the initial state of the linear-Gaussian model.
pub const LGSSM_INITIAL_VAR: f64 = 1.0;

/// A univariate normal distribution parameterized by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        if std <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "standard deviation must be positive, got {std}"
            )));
        }
        Ok(Gaussian1D { mean, std })
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// `log N(x; mean, std²)`.
pub fn gaussian_logpdf(x: f64, g: &Gaussian1D) -> Result<f64> {
    if !x.is_finite() || !g.mean.is_finite() || !g.std.is_finite() {
        return Err(Error::NonFinite("gaussian_logpdf input"));
    }
    let z = (x - g.mean) / g.std;
    Ok(-HALF_LN_2PI - g.std.ln() - 0.5 * z * z)
}

/// `mean + std * eps`.
pub fn gaussian_reparam(eps: f64, g: &Gaussian1D) -> f64 {
    g.mean + g.std * eps
}

/// `log N(x; mean, exp(log_var))` over any scalar.
#[inline]
pub fn normal_logpdf<S: Scalar>(x: S, mean: S, log_var: S) -> S {
    let r = x - mean;
    -(r * r * (-log_var).exp() + log_var) * 0.5 - HALF_LN_2PI
}

/// `log N(x; mean, var)` with a fixed variance.
#[inline]
pub fn normal_logpdf_fixed<S: Scalar>(x: S, mean: S, var: f64) -> S {
    let r = x - mean;
    r * r * (-0.5 / var) - (HALF_LN_2PI + 0.5 * var.ln())
}

// ---------------------------------------------------------------------------
// Linear-Gaussian family
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams {
    pub theta1: f64,
    pub theta2: f64,
}

impl LgssmParams {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        if !theta1.is_finite() || !theta2.is_finite() {
            return Err(Error::NonFinite("lgssm parameters"));
        }
        Ok(LgssmParams { theta1, theta2 })
    }
}

/// Scalar linear-Gaussian state-space model with explicit variances:
///
/// ```text
/// x_1 ~ N(0, init_var)
/// x_t ~ N(theta1 * x_{t-1}, trans_var)
/// y_t ~ N(theta2 * x_t, obs_var)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianSsm {
    pub theta1: f64,
    pub theta2: f64,
    pub init_var: f64,
    pub trans_var: f64,
    pub obs_var: f64,
}

impl LinearGaussianSsm {
    pub fn lgssm(p: LgssmParams) -> Self {
        LinearGaussianSsm {
            theta1: p.theta1,
            theta2: p.theta2,
            init_var: LGSSM_INITIAL_VAR,
            trans_var: LGSSM_TRANSITION_VAR,
            obs_var: LGSSM_OBSERVATION_VAR,
        }
    }

    /// The unknown-mean model viewed as a one-step state-space model.
    pub fn unknown_mean() -> Self {
        LinearGaussianSsm {
            theta1: 0.0,
            theta2: 1.0,
            init_var: 1.0,
            trans_var: 1.0,
            obs_var: 1.0,
        }
    }
}

/// Draws `(x_{1:T}, y_{1:T})` from the linear-Gaussian model.
pub fn lgssm_simulate(params: LgssmParams, len: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let m = LinearGaussianSsm::lgssm(params);
    let mut rng = replicate_rng(seed, 0);
    let mut xs = Vec::with_capacity(len);
    let mut ys = Vec::with_capacity(len);
    let mut prev = 0.0;
    for t in 0..len {
        let e: f64 = rng.sample(StandardNormal);
        let x = if t == 0 {
            m.init_var.sqrt() * e
        } else {
            m.theta1 * prev + m.trans_var.sqrt() * e
        };
        let v: f64 = rng.sample(StandardNormal);
        ys.push(m.theta2 * x + m.obs_var.sqrt() * v);
        xs.push(x);
        prev = x;
    }
    Ok((xs, ys))
}

/// Affine-Gaussian proposal for the linear-Gaussian model:
///
/// ```text
/// q_1(x_1 | y_1)          = N(b1 * y_1 + c1, exp(log_var1))
/// q_t(x_t | x_{t-1}, y_t) = N(a * x_{t-1} + b * y_t + c, exp(log_var))
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineProposalParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub log_var: f64,
    pub b1: f64,
    pub c1: f64,
    pub log_var1: f64,
}

impl AffineProposalParams {
    /// Proposal equal to the model's own prior dynamics under `theta1`.
    pub fn bootstrap_like(theta1: f64) -> Self {
        AffineProposalParams {
            a: theta1,
            b: 0.0,
            c: 0.0,
            log_var: LGSSM_TRANSITION_VAR.ln(),
            b1: 0.0,
            c1: 0.0,
            log_var1: LGSSM_INITIAL_VAR.ln(),
        }
    }

    /// The exact one-step conditional `p(x_t | x_{t-1}, y_t)` of `model`.
    pub fn locally_optimal(model: &LinearGaussianSsm) -> Self {
        let post = |prior_var: f64| {
            let prec = 1.0 / prior_var + model.theta2 * model.theta2 / model.obs_var;
            1.0 / prec
        };
        let v = post(model.trans_var);
        let v1 = post(model.init_var);
        AffineProposalParams {
            a: v * model.theta1 / model.trans_var,
            b: v * model.theta2 / model.obs_var,
            c: 0.0,
            log_var: v.ln(),
            b1: v1 * model.theta2 / model.obs_var,
            c1: 0.0,
            log_var1: v1.ln(),
        }
    }
}

/// Proposal `N(mu_q, exp(log_var_q))` for the unknown-mean model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownMeanProposalParams {
    pub mu_q: f64,
    pub log_var_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelSpec {
    Lgssm(LgssmParams),
    UnknownMean,
}

impl ModelSpec {
    pub fn linear_gaussian(&self) -> LinearGaussianSsm {
        match self {
            ModelSpec::Lgssm(p) => LinearGaussianSsm::lgssm(*p),
            ModelSpec::UnknownMean => LinearGaussianSsm::unknown_mean(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProposalSpec {
    Bootstrap,
    Affine(AffineProposalParams),
    UnknownMean(UnknownMeanProposalParams),
}

/// A model and proposal pair.
///
/// When `detach_model_in_proposal` is set, any model parameter the proposal
/// borrows (the bootstrap proposal borrows `theta1`) is treated as a constant
/// when differentiating, so gradients with respect to θ do not flow through
/// the proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub model: ModelSpec,
    pub proposal: ProposalSpec,
    pub detach_model_in_proposal: bool,
}

const AFFINE_NAMES: [&str; 7] = ["a", "b", "c", "log_var", "b1", "c1", "log_var1"];

impl Setup {
    pub fn new(model: ModelSpec, proposal: ProposalSpec) -> Self {
        Setup {
            model,
            proposal,
            detach_model_in_proposal: false,
        }
    }

    pub fn detached(mut self, detach: bool) -> Self {
        self.detach_model_in_proposal = detach;
        self
    }

    /// The unknown-mean model with its Gaussian proposal.
    pub fn unknown_mean(mu_q: f64, log_var_q: f64) -> Self {
        Setup::new(
            ModelSpec::UnknownMean,
            ProposalSpec::UnknownMean(UnknownMeanProposalParams { mu_q, log_var_q }),
        )
    }

    /// Parameter layout: model components first, then proposal components.
    pub fn params(&self) -> ParamVector {
        let mut items: Vec<(&str, ParamGroup, f64)> = Vec::new();
        if let ModelSpec::Lgssm(p) = self.model {
            items.push(("theta1", ParamGroup::Model, p.theta1));
            items.push(("theta2", ParamGroup::Model, p.theta2));
        }
        match self.proposal {
            ProposalSpec::Bootstrap => {}
            ProposalSpec::Affine(q) => {
                let v = [q.a, q.b, q.c, q.log_var, q.b1, q.c1, q.log_var1];
                for (n, x) in AFFINE_NAMES.iter().zip(v) {
                    items.push((n, ParamGroup::Proposal, x));
                }
            }
            ProposalSpec::UnknownMean(q) => {
                items.push(("mu_q", ParamGroup::Proposal, q.mu_q));
                items.push(("log_var_q", ParamGroup::Proposal, q.log_var_q));
            }
        }
        ParamVector::from_triples(&items).expect("fixed layout")
    }

    /// Same families with parameter values taken from `p`.
    pub fn with_params(&self, p: &ParamVector) -> Result<Setup> {
        let layout = self.params();
        if layout.len() != p.len() || layout.names().zip(p.names()).any(|(a, b)| a != b) {
            return Err(Error::InvalidParameter(
                "parameter vector does not match the setup layout".into(),
            ));
        }
        let v = p.values();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        let mut out = *self;
        let mut i = 0;
        if let ModelSpec::Lgssm(_) = self.model {
            out.model = ModelSpec::Lgssm(LgssmParams::new(v[0], v[1])?);
            i = 2;
        }
        match self.proposal {
            ProposalSpec::Bootstrap => {}
            ProposalSpec::Affine(_) => {
                out.proposal = ProposalSpec::Affine(AffineProposalParams {
                    a: v[i],
                    b: v[i + 1],
                    c: v[i + 2],
                    log_var: v[i + 3],
                    b1: v[i + 4],
                    c1: v[i + 5],
                    log_var1: v[i + 6],
                });
            }
            ProposalSpec::UnknownMean(_) => {
                out.proposal = ProposalSpec::UnknownMean(UnknownMeanProposalParams {
                    mu_q: v[i],
                    log_var_q: v[i + 1],
                });
            }
        }
        Ok(out)
    }

    /// The setup over `f64`, ready for sweeps.
    pub fn kernel<'a>(&self, obs: &'a [f64]) -> GaussianKernel<'a, f64> {
        let v = self.params().values();
        self.lift(obs, &v)
    }

    /// The setup with parameter `i` replaced by `vars[i]`, in [`Setup::params`] order.
    pub fn lift<'a, S: Scalar>(&self, obs: &'a [f64], vars: &[S]) -> GaussianKernel<'a, S> {
        debug_assert_eq!(vars.len(), self.params().len());
        let base = self.model.linear_gaussian();
        let (theta1, theta2, mut i) = match self.model {
            ModelSpec::Lgssm(_) => (vars[0], vars[1], 2),
            ModelSpec::UnknownMean => (S::constant(base.theta1), S::constant(base.theta2), 0),
        };
        let proposal = match self.proposal {
            ProposalSpec::Bootstrap => LiftedProposal::Bootstrap {
                theta1: if self.detach_model_in_proposal {
                    theta1.detach()
                } else {
                    theta1
                },
            },
            ProposalSpec::Affine(_) => {
                let p = LiftedProposal::Affine {
                    a: vars[i],
                    b: vars[i + 1],
                    c: vars[i + 2],
                    log_var: vars[i + 3],
                    b1: vars[i + 4],
                    c1: vars[i + 5],
                    log_var1: vars[i + 6],
                };
                i += 7;
                p
            }
            ProposalSpec::UnknownMean(_) => {
                let p = LiftedProposal::Affine {
                    a: S::constant(0.0),
                    b: S::constant(0.0),
                    c: S::constant(0.0),
                    log_var: S::constant(0.0),
                    b1: S::constant(0.0),
                    c1: vars[i],
                    log_var1: vars[i + 1],
                };
                i += 2;
                p
            }
        };
        debug_assert_eq!(i, vars.len());
        GaussianKernel {
            obs,
            theta1,
            theta2,
            init_var: base.init_var,
            trans_var: base.trans_var,
            obs_var: base.obs_var,
            ln_init_var: base.init_var.ln(),
            ln_trans_var: base.trans_var.ln(),
            proposal,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum LiftedProposal<S> {
    Bootstrap {
        theta1: S,
    },
    Affine {
        a: S,
        b: S,
        c: S,
        log_var: S,
        b1: S,
        c1: S,
        log_var1: S,
    },
}

/// A continuous setup bound to an observation sequence, over scalar `S`.
#[derive(Debug, Clone)]
pub struct GaussianKernel<'a, S> {
    obs: &'a [f64],
    theta1: S,
    theta2: S,
    init_var: f64,
    trans_var: f64,
    obs_var: f64,
    ln_init_var: f64,
    ln_trans_var: f64,
    proposal: LiftedProposal<S>,
}

impl<'a, S: Scalar> GaussianKernel<'a, S> {
    pub fn observations(&self) -> &'a [f64] {
        self.obs
    }

    /// Mean and log-variance of the proposal at step `t` (0-based).
    pub fn proposal_moments(&self, t: usize, parent: Option<S>) -> Result<(S, S)> {
        if t >= self.obs.len() {
            return Err(Error::InvalidParameter(format!(
                "step {t} outside horizon {}",
                self.obs.len()
            )));
        }
        let y = self.obs[t];
        match (t, parent) {
            (0, _) => Ok(match self.proposal {
                LiftedProposal::Bootstrap { .. } => {
                    (S::constant(0.0), S::constant(self.ln_init_var))
                }
                LiftedProposal::Affine { b1, c1, log_var1, .. } => (b1 * y + c1, log_var1),
            }),
            (_, None) => Err(Error::MissingHistory(t)),
            (_, Some(p)) => Ok(match self.proposal {
                LiftedProposal::Bootstrap { theta1 } => {
                    (theta1 * p, S::constant(self.ln_trans_var))
                }
                LiftedProposal::Affine { a, b, c, log_var, .. } => (a * p + b * y + c, log_var),
            }),
        }
    }

    /// `log μ(x)` or `log f(x | parent)`.
    #[inline]
    pub fn prior_logpdf(&self, x: S, parent: Option<S>) -> S {
        match parent {
            None => normal_logpdf_fixed(x, S::constant(0.0), self.init_var),
            Some(p) => normal_logpdf_fixed(x, self.theta1 * p, self.trans_var),
        }
    }

    /// `log g(y_t | x)`.
    #[inline]
    pub fn emission_logpdf(&self, t: usize, x: S) -> S {
        normal_logpdf_fixed(S::constant(self.obs[t]), self.theta2 * x, self.obs_var)
    }
}

impl<'a, S: Scalar> Kernel<S> for GaussianKernel<'a, S> {
    type State = S;

    fn horizon(&self) -> usize {
        self.obs.len()
    }

    #[inline]
    fn step<R: Rng + ?Sized>(
        &self,
        t: usize,
        parent: Option<S>,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Step<S, S>> {
        let (mean, log_var) = self.proposal_moments(t, parent)?;
        let eps: f64 = rng.sample(StandardNormal);
        let std = (log_var * 0.5).exp();
        let x_live = mean + std * eps;
        let (x, log_q) = match sampling {
            // N(mean + std*eps; mean, std²) reduces to a function of eps and log_var only.
            Sampling::Reparameterized => (x_live, -(log_var + eps * eps) * 0.5 - HALF_LN_2PI),
            Sampling::Score => {
                let x = x_live.detach();
                (x, normal_logpdf(x, mean, log_var))
            }
        };
        let log_w = self.prior_logpdf(x, parent) + self.emission_logpdf(t, x) - log_q;
        Ok(Step {
            state: x,
            value: x.value(),
            noise: eps,
            log_q,
            log_w,
        })
    }
}

/// Log-density of the proposal of `setup` at step `t` (0-based), given the
/// history `x_{1:t-1}` and observations `y_{1:t}` (at least `t + 1` entries).
pub fn proposal_density(
    setup: &Setup,
    t: usize,
    x: f64,
    history: &[f64],
    obs: &[f64],
) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("proposal_density input"));
    }
    if t > 0 && history.len() < t {
        return Err(Error::MissingHistory(t));
    }
    let k = setup.kernel(obs);
    let parent = if t == 0 { None } else { Some(history[t - 1]) };
    let (mean, log_var) = k.proposal_moments(t, parent)?;
    Ok(normal_logpdf(x, mean, log_var))
}

// ---------------------------------------------------------------------------
// Discrete hidden Markov models
// ---------------------------------------------------------------------------

/// A finite-state, finite-alphabet hidden Markov model over a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteHmmSpec {
    pub num_states: usize,
    pub num_symbols: usize,
    pub initial: Vec<f64>,
    /// `transition[i][j] = p(x_t = j | x_{t-1} = i)`.
    pub transition: Vec<Vec<f64>>,
    /// `emission[i][s] = p(y_t = s | x_t = i)`.
    pub emission: Vec<Vec<f64>>,
    pub horizon: usize,
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: p.len(),
        });
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidParameter(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// A roughly flat-Dirichlet draw, kept away from zero so every entry has support.
fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let s: f64 = e.iter().sum();
    let mut p: Vec<f64> = e.iter().map(|x| x / s).collect();
    let rest: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - rest;
    p
}

impl DiscreteHmmSpec {
    pub fn new(
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
        horizon: usize,
    ) -> Result<Self> {
        let n = initial.len();
        if n == 0 || horizon == 0 {
            return Err(Error::InvalidParameter("empty state space or horizon".into()));
        }
        let m = emission.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::InvalidParameter("empty observation alphabet".into()));
        }
        check_distribution(&initial, n, "initial distribution")?;
        if transition.len() != n || emission.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: transition.len().min(emission.len()),
            });
        }
        for row in &transition {
            check_distribution(row, n, "transition row")?;
        }
        for row in &emission {
            check_distribution(row, m, "emission row")?;
        }
        Ok(DiscreteHmmSpec {
            num_states: n,
            num_symbols: m,
            initial,
            transition,
            emission,
            horizon,
        })
    }

    /// A model with every row drawn from the flat Dirichlet distribution.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        num_symbols: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let initial = random_simplex(num_states, rng);
        let transition = (0..num_states).map(|_| random_simplex(num_states, rng)).collect();
        let emission = (0..num_states).map(|_| random_simplex(num_symbols, rng)).collect();
        DiscreteHmmSpec::new(initial, transition, emission, horizon)
    }

    pub fn check_observations(&self, obs: &[f64]) -> Result<Vec<usize>> {
        if obs.len() != self.horizon {
            return Err(Error::DimensionMismatch {
                expected: self.horizon,
                got: obs.len(),
            });
        }
        obs.iter()
            .enumerate()
            .map(|(t, &y)| {
                let s = y as usize;
                if y < 0.0 || y.fract() != 0.0 || s >= self.num_symbols {
                    Err(Error::InvalidSymbol {
                        step: t,
                        symbol: s,
                        alphabet: self.num_symbols,
                    })
                } else {
                    Ok(s)
                }
            })
            .collect()
    }

    /// `log p(x_{1:t}, y_{1:t})` for a state prefix, the unnormalized target `γ_t`.
    pub fn log_joint_prefix(&self, path: &[usize], obs: &[usize]) -> f64 {
        let mut lp = 0.0;
        for (t, &x) in path.iter().enumerate() {
            let step = if t == 0 {
                self.initial[x]
            } else {
                self.transition[path[t - 1]][x]
            };
            lp += step.ln() + self.emission[x][obs[t]].ln();
        }
        lp
    }
}

/// Markov proposal tables for a discrete model, already conditioned on the
/// observations: `initial[x] = q_1(x | y)` and
/// `transitions[t-1][i][j] = q_{t+1}(x_{t+1} = j | x_t = i, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProposal {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl DiscreteProposal {
    pub fn new(initial: Vec<f64>, transitions: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = initial.len();
        check_distribution(&initial, n, "proposal initial")?;
        for m in &transitions {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: m.len(),
                });
            }
            for row in m {
                check_distribution(row, n, "proposal row")?;
            }
        }
        Ok(DiscreteProposal {
            initial,
            transitions,
        })
    }

    /// Flat-Dirichlet tables for every step.
    pub fn random<R: Rng + ?Sized>(num_states: usize, horizon: usize, rng: &mut R) -> Self {
        DiscreteProposal {
            initial: random_simplex(num_states, rng),
            transitions: (1..horizon)
                .map(|_| (0..num_states).map(|_| random_simplex(num_states, rng)).collect())
                .collect(),
        }
    }

    /// Proposes from the model's own prior dynamics.
    pub fn bootstrap(spec: &DiscreteHmmSpec) -> Self {
        DiscreteProposal {
            initial: spec.initial.clone(),
            transitions: vec![spec.transition.clone(); spec.horizon - 1],
        }
    }

    /// Mixes every table with the uniform distribution: `(1 - eps) q + eps / n`.
    pub fn perturbed(&self, eps: f64) -> Self {
        let n = self.initial.len() as f64;
        let mix = |row: &Vec<f64>| row.iter().map(|p| (1.0 - eps) * p + eps / n).collect();
        DiscreteProposal {
            initial: mix(&self.initial),
            transitions: self
                .transitions
                .iter()
                .map(|m| m.iter().map(mix).collect())
                .collect(),
        }
    }

    pub fn log_prob_path(&self, path: &[usize]) -> f64 {
        let mut lp = self.initial[path[0]].ln();
        for t in 1..path.len() {
            lp += self.transitions[t - 1][path[t - 1]][path[t]].ln();
        }
        lp
    }
}

/// Intermediate target sequence used by SMC on a discrete model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntermediateTargets {
    /// `γ_t = p(x_{1:t}, y_{1:t})`, the usual state-space choice.
    Filtering,
    /// `γ_t = p(x_{1:t}, y_{1:T})`, the marginals of the final target.
    Smoothing,
}

/// A discrete model, proposal and target sequence bound to observations.
#[derive(Debug, Clone)]
pub struct DiscreteKernel<'a> {
    spec: &'a DiscreteHmmSpec,
    proposal: &'a DiscreteProposal,
    obs: Vec<usize>,
    /// `log β_t(x)` twisting added to the filtering targets (zero for filtering).
    log_twist: Vec<Vec<f64>>,
}

impl<'a> DiscreteKernel<'a> {
    pub fn new(
        spec: &'a DiscreteHmmSpec,
        proposal: &'a DiscreteProposal,
        obs: &[f64],
        targets: IntermediateTargets,
    ) -> Result<Self> {
        let obs = spec.check_observations(obs)?;
        if proposal.initial.len() != spec.num_states
            || proposal.transitions.len() + 1 != spec.horizon
        {
            return Err(Error::DimensionMismatch {
                expected: spec.horizon - 1,
                got: proposal.transitions.len(),
            });
        }
        let log_twist = match targets {
            IntermediateTargets::Filtering => vec![vec![0.0; spec.num_states]; spec.horizon],
            IntermediateTargets::Smoothing => crate::oracle::hmm_log_backward(spec, &obs),
        };
        let k = DiscreteKernel {
            spec,
            proposal,
            obs,
            log_twist,
        };
        k.check_support()?;
        Ok(k)
    }

    /// Every state with positive incremental target mass must be proposable.
    fn check_support(&self) -> Result<()> {
        let n = self.spec.num_states;
        for x in 0..n {
            if self.log_increment(0, None, x) > f64::NEG_INFINITY && self.proposal.initial[x] <= 0.0 {
                return Err(Error::InvalidSupport { step: 0, state: x });
            }
        }
        for t in 1..self.spec.horizon {
            for p in 0..n {
                for x in 0..n {
                    if self.log_increment(t, Some(p), x) > f64::NEG_INFINITY
                        && self.proposal.transitions[t - 1][p][x] <= 0.0
                    {
                        return Err(Error::InvalidSupport { step: t, state: x });
                    }
                }
            }
        }
        Ok(())
    }

    /// `log γ_t(x_{1:t}) - log γ_{t-1}(x_{1:t-1})`.
    pub fn log_increment(&self, t: usize, parent: Option<usize>, x: usize) -> f64 {
        let s = self.spec;
        let emit = s.emission[x][self.obs[t]].ln();
        match parent {
            None => s.initial[x].ln() + emit + self.log_twist[0][x],
            // A parent outside the twisted target's support has zero weight already.
            Some(p) if self.log_twist[t - 1][p] == f64::NEG_INFINITY => f64::NEG_INFINITY,
            Some(p) => {
                s.transition[p][x].ln() + emit + self.log_twist[t][x] - self.log_twist[t - 1][p]
            }
        }
    }

    pub fn proposal_prob(&self, t: usize, parent: Option<usize>, x: usize) -> f64 {
        match parent {
            None => self.proposal.initial[x],
            Some(p) => self.proposal.transitions[t - 1][p][x],
        }
    }

    pub fn num_states(&self) -> usize {
        self.spec.num_states
    }

    pub fn symbols(&self) -> &[usize] {
        &self.obs
    }
}

impl<'a> Kernel<f64> for DiscreteKernel<'a> {
    type State = usize;

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn step<R: Rng + ?Sized>(
        &self,
        t: usize,
        parent: Option<usize>,
        _sampling: Sampling,
        rng: &mut R,
    ) -> Result<Step<f64, usize>> {
        if t > 0 && parent.is_none() {
            return Err(Error::MissingHistory(t));
        }
        let row = match parent {
            None => &self.proposal.initial,
            Some(p) => &self.proposal.transitions[t - 1][p],
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut x = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                x = j;
                break;
            }
        }
        let log_q = row[x].ln();
        Ok(Step {
            state: x,
            value: x as f64,
            noise: u,
            log_q,
            log_w: self.log_increment(t, parent, x) - log_q,
        })
    }
}
