//! Edge flips evaluated with the random effects integrated out.
//!
//! With `r = mu - X beta`, `b = r / s_mu` and `Q = L / s_eps + I / s_mu`,
//! the collapsed log-likelihood of `r` given the graph is
//!
//! ```text
//! -1/2 [ c log s_mu + log det Q - c log s_eps - pdet(L)
//!        - b^T Q^{-1} b + sum_C (sum_{i in C} r_i)^2 / (|C| s_mu) ] + const
//! ```
//!
//! Toggling `B_ij` changes `Q` by `s (e_i - e_j)(e_i - e_j)^T / s_eps`, so each
//! term changes in closed form given `Q^{-1}` and `Q^{-1} b`.

use nalgebra::DVector;

use crate::domain::SpatialDomain;
use crate::error::{Error, Result};
use crate::gmrf::{conditional_precision, FlipEffect, FlipKind, SymPacked};

use super::ModelState;

/// `Q^{-1}` and `Q^{-1} b` for the current graph and variances.
#[derive(Debug, Clone)]
pub struct FlipCache {
    qinv: SymPacked,
    m: DVector<f64>,
    r: DVector<f64>,
    sigma2_eps: f64,
    sigma2_mu: f64,
}

/// A candidate toggle of one indicator and its log acceptance ratio.
#[derive(Debug, Clone)]
pub struct FlipProposal {
    pub effect: FlipEffect,
    /// Change in the collapsed log posterior.
    pub log_ratio: f64,
    /// `s_eps + s u^T Q^{-1} u`.
    pivot: f64,
}

impl FlipCache {
    pub fn new(state: &ModelState, domain: &SpatialDomain) -> Result<Self> {
        let (s_e, s_m) = (state.sigma2_eps, state.sigma2_mu);
        let q = conditional_precision(&state.adjacency, s_e, s_m);
        let chol = q
            .cholesky()
            .ok_or_else(|| Error::Numerical("conditional precision is not positive definite".into()))?;
        let r = state.residual(domain);
        let m = chol.solve(&(&r / s_m));
        Ok(Self {
            qinv: SymPacked::from_lower(&chol.inverse()),
            m,
            r,
            sigma2_eps: s_e,
            sigma2_mu: s_m,
        })
    }

    fn component_sum(&self, units: &[usize]) -> f64 {
        units.iter().map(|&u| self.r[u]).sum()
    }

    /// Evaluates toggling `B_ij` against the collapsed posterior.
    pub fn propose(&self, state: &ModelState, domain: &SpatialDomain, i: usize, j: usize) -> FlipProposal {
        let graph = &state.adjacency;
        let effect = graph.flip_effect(i, j);
        let adding = effect.adds_edge();
        let sign = if adding { 1.0 } else { -1.0 };
        let (s_e, s_m) = (self.sigma2_eps, self.sigma2_mu);

        let logit = state.nbr.logit(domain.d1[(i, j)], state.positions.distance(i, j));
        // log p - log(1 - p) is the logit itself.
        let prior = sign * logit;

        let uw = self.qinv.quad_diff(i, j);
        let wb = self.m[i] - self.m[j];
        let pivot = s_e + sign * uw;
        let d_logdet_q = (pivot / s_e).ln();
        let d_bqb = -sign * wb * wb / pivot;

        let d_kernel = match &effect.kind {
            FlipKind::Merge => {
                let ca = graph.component_of(i);
                let cb = graph.component_of(j);
                let (sa, sb) = (self.component_sum(ca), self.component_sum(cb));
                let (na, nb) = (ca.len() as f64, cb.len() as f64);
                (sa + sb).powi(2) / (na + nb) - sa * sa / na - sb * sb / nb
            }
            FlipKind::Split { side } => {
                let whole = graph.component_of(i);
                let total = self.component_sum(whole);
                let sa = self.component_sum(side);
                let sb = total - sa;
                let na = side.len() as f64;
                let nb = whole.len() as f64 - na;
                sa * sa / na + sb * sb / nb - total * total / (na + nb)
            }
            _ => 0.0,
        };
        let dc = effect.delta_components() as f64;
        let likelihood = -0.5
            * (dc * (s_m.ln() - s_e.ln()) + d_logdet_q - effect.delta_logdet - d_bqb + d_kernel / s_m);

        FlipProposal {
            log_ratio: prior + likelihood,
            effect,
            pivot,
        }
    }

    /// Applies an accepted proposal to the graph and to this cache.
    pub fn accept(&mut self, state: &mut ModelState, proposal: &FlipProposal) -> Result<()> {
        let (i, j) = (proposal.effect.i, proposal.effect.j);
        let sign = if proposal.effect.adds_edge() { 1.0 } else { -1.0 };
        let w = self.qinv.column_diff(i, j);
        let wb = self.m[i] - self.m[j];
        let scale = sign / proposal.pivot;
        for (mu, wu) in self.m.iter_mut().zip(&w) {
            *mu -= scale * wu * wb;
        }
        self.qinv.rank_one_update(&w, -scale);
        state.adjacency.apply_flip(&proposal.effect)
    }
}
