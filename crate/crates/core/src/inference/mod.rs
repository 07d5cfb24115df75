//! Metropolis-within-Gibbs sampler for the full hierarchy.
//!
//! One sweep runs, in order: edge flips (with the random effects integrated
//! out), latent positions, `alpha`/`gamma`, a fresh draw of the random
//! effects, `delta`/`beta`/`mu`, and the two variances.

mod chain;
mod flips;
mod updates;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::domain::SpatialDomain;
use crate::error::{Error, Result};
use crate::gmrf::{icar_logdensity, marginal_loglik, AdjacencyState, RandomEffects};
use crate::neighborhood::{adjacency_logprob, position_logprior, LatentPositions, NeighborhoodParams};

pub use chain::{
    initial_state, monitored_parameters, run_chain, run_chains, sample_prior, sample_response, sub_seed,
    sweep, AcceptanceLedger, ChainDraws, Draw, RateCounter, RunSettings,
};
pub use flips::{FlipCache, FlipProposal};
pub use updates::{
    alpha_log_ratio, beta_conditional, flip_edges, gamma_log_ratio, mu_conditional,
    position_log_ratio, reflect_unit, update_alpha_gamma, update_delta_beta_mu, update_epsilon,
    update_positions, update_variances, variance_conditionals, InvGammaParams,
};

/// Which neighborhood model is fitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Geographic and latent distance, `gamma` learned.
    #[default]
    Nnsd,
    /// Geographic distance only (`gamma = 1`).
    Nn,
    /// Latent distance only (`gamma = 0`).
    Sd,
    /// Adjacency fixed to the supplied geographic graph.
    Icar,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Icar, Variant::Nn, Variant::Nnsd, Variant::Sd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nnsd => "nnsd",
            Variant::Nn => "nn",
            Variant::Sd => "sd",
            Variant::Icar => "icar",
        }
    }

    pub fn pinned_gamma(self) -> Option<f64> {
        match self {
            Variant::Nn => Some(1.0),
            Variant::Sd => Some(0.0),
            _ => None,
        }
    }

    pub fn learns_graph(self) -> bool {
        self != Variant::Icar
    }

    /// Whether latent positions influence the adjacency and get updated.
    pub fn moves_positions(self) -> bool {
        matches!(self, Variant::Nnsd | Variant::Sd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nnsd" => Ok(Variant::Nnsd),
            "nn" => Ok(Variant::Nn),
            "sd" => Ok(Variant::Sd),
            "icar" => Ok(Variant::Icar),
            other => Err(Error::invalid("variant", format!("unknown variant {other:?}"))),
        }
    }
}

/// Prior constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    pub sigma2_delta: f64,
    pub sigma2_z: f64,
    pub a_mu: f64,
    pub b_mu: f64,
    pub a_eps: f64,
    pub b_eps: f64,
    #[serde(skip)]
    pub variant: Variant,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            sigma2_alpha: 3.0,
            sigma2_beta: 100.0,
            sigma2_delta: 100.0,
            sigma2_z: 1.0,
            a_mu: 2.0,
            b_mu: 1.0,
            a_eps: 2.0,
            b_eps: 1.0,
            variant: Variant::Nnsd,
        }
    }
}

impl Hyperparams {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_alpha", self.sigma2_alpha),
            ("sigma2_beta", self.sigma2_beta),
            ("sigma2_delta", self.sigma2_delta),
            ("sigma2_z", self.sigma2_z),
            ("a_mu", self.a_mu),
            ("b_mu", self.b_mu),
            ("a_eps", self.a_eps),
            ("b_eps", self.b_eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Random-walk proposal scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizes {
    pub alpha: f64,
    pub gamma: f64,
    pub position: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            gamma: 0.1,
            position: 0.1,
        }
    }
}

impl StepSizes {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("position", self.position)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(
                    format!("step_sizes.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Blocks held at their initial values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Frozen {
    pub alpha: bool,
    pub gamma: bool,
    pub positions: bool,
    pub variances: bool,
}

/// One complete set of latent quantities.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub adjacency: AdjacencyState,
    pub positions: LatentPositions,
    pub nbr: NeighborhoodParams,
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    pub eps: RandomEffects,
    pub sigma2_mu: f64,
    pub sigma2_eps: f64,
}

impl ModelState {
    /// `X beta`.
    pub fn linear_predictor(&self, domain: &SpatialDomain) -> DVector<f64> {
        &domain.x * &self.beta
    }

    /// `mu - X beta`, the quantity the random effects explain.
    pub fn residual(&self, domain: &SpatialDomain) -> DVector<f64> {
        &self.mu - self.linear_predictor(domain)
    }

    pub fn check_shapes(&self, domain: &SpatialDomain) -> Result<()> {
        let n = domain.n();
        let pairs = [
            (self.adjacency.n(), n),
            (self.positions.len(), n),
            (self.mu.len(), n),
            (self.eps.len(), n),
            (self.beta.len(), domain.p()),
            (self.nbr.delta.len(), domain.k()),
        ];
        for (left, right) in pairs {
            if left != right {
                return Err(Error::LengthMismatch { left, right });
            }
        }
        Ok(())
    }
}

pub(crate) fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

pub(crate) fn inv_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Every term except the random-effects prior and the `mu | X beta + eps`
/// layer.
fn shared_terms(state: &ModelState, domain: &SpatialDomain, hp: &Hyperparams) -> f64 {
    let gamma = state.nbr.gamma;
    if !(0.0..=1.0).contains(&gamma) {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for i in 0..domain.n() {
        total += normal_logpdf(domain.y[i], state.mu[i], domain.var_y[i]);
    }
    if hp.variant.learns_graph() {
        total += adjacency_logprob(&state.adjacency, &state.nbr, &state.positions, &domain.d1);
        total += position_logprior(&state.positions, &domain.s, &state.nbr.delta, hp.sigma2_z);
        total += normal_logpdf(state.nbr.alpha, 0.0, hp.sigma2_alpha);
        total += state
            .nbr
            .delta
            .iter()
            .map(|d| normal_logpdf(*d, 0.0, hp.sigma2_delta))
            .sum::<f64>();
    }
    total += state
        .beta
        .iter()
        .map(|b| normal_logpdf(*b, 0.0, hp.sigma2_beta))
        .sum::<f64>();
    total += inv_gamma_logpdf(state.sigma2_mu, hp.a_mu, hp.b_mu);
    total += inv_gamma_logpdf(state.sigma2_eps, hp.a_eps, hp.b_eps);
    total
}

/// Unnormalized log posterior of the full state.
///
/// For the ICAR variant the neighborhood block (adjacency, positions,
/// `alpha`, `gamma`, `delta`) is inert and omitted. Returns `-inf` outside
/// the support, including constraint violations.
pub fn joint_logdensity(state: &ModelState, domain: &SpatialDomain, hp: &Hyperparams) -> f64 {
    let shared = shared_terms(state, domain, hp);
    if shared == f64::NEG_INFINITY {
        return shared;
    }
    let eps = match icar_logdensity(&state.eps, &state.adjacency, state.sigma2_eps) {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    let mean = state.linear_predictor(domain) + state.eps.values();
    let mu: f64 = (0..domain.n())
        .map(|i| normal_logpdf(state.mu[i], mean[i], state.sigma2_mu))
        .sum();
    shared + eps + mu
}

/// [`joint_logdensity`] with the random effects integrated out; the target
/// of the edge-flip move.
pub fn collapsed_logdensity(state: &ModelState, domain: &SpatialDomain, hp: &Hyperparams) -> f64 {
    let shared = shared_terms(state, domain, hp);
    if shared == f64::NEG_INFINITY {
        return shared;
    }
    let r = state.residual(domain);
    match marginal_loglik(&r, &state.adjacency, state.sigma2_eps, state.sigma2_mu) {
        Ok(v) => shared + v,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Least-squares coefficients of `y` on `x`.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    x.clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|e| Error::Numerical(format!("least squares: {e}")))
}
