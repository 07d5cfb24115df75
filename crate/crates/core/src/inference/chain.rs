use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::SpatialDomain;
use crate::error::{Error, Result};
use crate::gmrf::{sample_icar_prior, AdjacencyState, RandomEffects};
use crate::neighborhood::{
    edge_prob_matrix, in_disk, position_mean, sample_adjacency, sample_positions_prior, LatentPositions,
    NeighborhoodParams,
};

use super::updates::{
    flip_edges, update_alpha_gamma, update_delta_beta_mu, update_epsilon, update_positions, update_variances,
    InvGammaParams,
};
use super::{joint_logdensity, least_squares, Frozen, Hyperparams, ModelState, StepSizes, Variant};

const TARGET_ACCEPTANCE: f64 = 0.3;

/// Proposal and acceptance counts for one update type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RateCounter {
    pub proposed: u64,
    pub accepted: u64,
}

impl RateCounter {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AcceptanceLedger {
    pub flips: RateCounter,
    pub positions: RateCounter,
    pub alpha: RateCounter,
    pub gamma: RateCounter,
}

/// Length, seeding and tuning of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub step_sizes: StepSizes,
    /// Robbins-Monro step-size tuning during burn-in.
    pub adapt: bool,
    /// Edge-flip proposals per sweep; defaults to the number of pairs.
    pub flip_proposals: Option<usize>,
    pub frozen: Frozen,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 10_000,
            thin: 1,
            seed: 1,
            step_sizes: StepSizes::default(),
            adapt: true,
            flip_proposals: None,
            frozen: Frozen::default(),
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be less than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin", "must be at least 1"));
        }
        if self.flip_proposals == Some(0) {
            return Err(Error::invalid("flip_proposals", "must be at least 1"));
        }
        self.step_sizes.validate()
    }

    /// Number of retained draws.
    pub fn kept(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    fn proposals(&self, n: usize) -> usize {
        self.flip_proposals.unwrap_or(n * (n - 1) / 2)
    }
}

/// A retained snapshot of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub alpha: f64,
    pub gamma: f64,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub eps: Vec<f64>,
    pub sigma2_mu: f64,
    pub sigma2_eps: f64,
    pub log_posterior: f64,
    pub edge_count: usize,
    pub n_components: usize,
    /// Upper-triangle indicators as packed by [`AdjacencyState::edge_bits`].
    pub edge_bits: Vec<u64>,
    pub positions: Vec<[f64; 2]>,
}

impl Draw {
    fn from_state(state: &ModelState, log_posterior: f64) -> Self {
        Self {
            alpha: state.nbr.alpha,
            gamma: state.nbr.gamma,
            delta: state.nbr.delta.as_slice().to_vec(),
            beta: state.beta.as_slice().to_vec(),
            mu: state.mu.as_slice().to_vec(),
            eps: state.eps.as_slice().to_vec(),
            sigma2_mu: state.sigma2_mu,
            sigma2_eps: state.sigma2_eps,
            log_posterior,
            edge_count: state.adjacency.edge_count(),
            n_components: state.adjacency.n_components(),
            edge_bits: state.adjacency.edge_bits(),
            positions: state.positions.rows().to_vec(),
        }
    }

    pub fn has_edge(&self, n: usize, i: usize, j: usize) -> bool {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let k = a * n - a * (a + 1) / 2 + (b - a - 1);
        self.edge_bits[k / 64] >> (k % 64) & 1 == 1
    }

    /// Rebuilds the sampled graph.
    pub fn adjacency(&self) -> Result<AdjacencyState> {
        let n = self.mu.len();
        let mut list = Vec::with_capacity(self.edge_count);
        for i in 0..n {
            for j in (i + 1)..n {
                if self.has_edge(n, i, j) {
                    list.push((i, j));
                }
            }
        }
        AdjacencyState::from_edge_list(n, &list)
    }

    /// Value of a named scalar parameter (`alpha`, `beta[0]`, ...).
    pub fn scalar(&self, name: &str) -> Option<f64> {
        let indexed = |prefix: &str, v: &[f64]| -> Option<f64> {
            let idx: usize = name.strip_prefix(prefix)?.strip_suffix(']')?.parse().ok()?;
            v.get(idx).copied()
        };
        match name {
            "alpha" => Some(self.alpha),
            "gamma" => Some(self.gamma),
            "sigma2_mu" => Some(self.sigma2_mu),
            "sigma2_eps" => Some(self.sigma2_eps),
            "log_posterior" => Some(self.log_posterior),
            "edge_count" => Some(self.edge_count as f64),
            _ => indexed("beta[", &self.beta).or_else(|| indexed("delta[", &self.delta)),
        }
    }
}

/// Scalar parameters that move under `variant`.
pub fn monitored_parameters(variant: Variant, p: usize, k: usize) -> Vec<String> {
    let mut names = Vec::new();
    if variant.learns_graph() {
        names.push("alpha".to_string());
    }
    if variant == Variant::Nnsd {
        names.push("gamma".to_string());
    }
    names.extend((0..p).map(|j| format!("beta[{j}]")));
    if variant.moves_positions() {
        names.extend((0..k).map(|j| format!("delta[{j}]")));
    }
    names.push("sigma2_mu".to_string());
    names.push("sigma2_eps".to_string());
    names
}

/// Output of one chain.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    pub chain_index: usize,
    pub seed: u64,
    pub variant: Variant,
    pub draws: Vec<Draw>,
    /// Share of retained draws containing each edge.
    pub edge_freq: DMatrix<f64>,
    pub acceptance: AcceptanceLedger,
    pub final_step_sizes: StepSizes,
    pub final_state: ModelState,
}

impl ChainDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn trace(&self, name: &str) -> Option<Vec<f64>> {
        self.draws.iter().map(|d| d.scalar(name)).collect()
    }

    /// Draws-by-parameter matrix for the named scalars.
    pub fn scalar_matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.draws.len(), names.len());
        for (j, name) in names.iter().enumerate() {
            let col = self
                .trace(name)
                .ok_or_else(|| Error::invalid("parameter", format!("unknown scalar {name:?}")))?;
            m.set_column(j, &DVector::from_vec(col));
        }
        Ok(m)
    }
}

/// Chain-`k` seed derived from the master seed with a splitmix64 step.
pub fn sub_seed(master: u64, chain: usize) -> u64 {
    let mut z = master.wrapping_add((chain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 0, +1, -1, +2, -2, ...
fn chain_offset(chain: usize) -> f64 {
    let step = chain.div_ceil(2) as f64;
    if chain % 2 == 1 {
        step
    } else {
        -step
    }
}

/// Two-dimensional classical scaling of a distance matrix, or `None` when
/// the configuration is degenerate.
fn classical_mds(dist: &DMatrix<f64>) -> Option<Vec<[f64; 2]>> {
    let n = dist.nrows();
    let sq = dist.map(|d| d * d);
    let row_means = DVector::from_fn(n, |i, _| sq.row(i).mean());
    let grand = sq.mean();
    let gram = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]].max(0.0));
    if !(l1.is_finite() && l1 > 1e-12) {
        return None;
    }
    let (c1, c2) = (order[0], order[1]);
    Some(
        (0..n)
            .map(|i| [eig.eigenvectors[(i, c1)] * l1.sqrt(), eig.eigenvectors[(i, c2)] * l2.sqrt()])
            .collect(),
    )
}

fn initial_positions<R: Rng + ?Sized>(y: &DVector<f64>, rng: &mut R) -> LatentPositions {
    let n = y.len();
    let dist = DMatrix::from_fn(n, n, |i, j| (y[i] - y[j]).abs());
    let mut rows = classical_mds(&dist).unwrap_or_else(|| {
        (0..n)
            .map(|_| [0.1 * rng.sample::<f64, _>(StandardNormal), 0.1 * rng.sample::<f64, _>(StandardNormal)])
            .collect()
    });
    let radius = rows.iter().map(|z| z[0].hypot(z[1])).fold(0.0, f64::max);
    let scale = if radius > 0.0 { 0.9 / radius } else { 1.0 };
    for z in rows.iter_mut() {
        let jitter = [0.02 * rng.sample::<f64, _>(StandardNormal), 0.02 * rng.sample::<f64, _>(StandardNormal)];
        let moved = [z[0] * scale + jitter[0], z[1] * scale + jitter[1]];
        *z = if in_disk(&moved) { moved } else { [z[0] * scale, z[1] * scale] };
        if !in_disk(z) {
            *z = [0.0, 0.0];
        }
    }
    LatentPositions::new(rows).expect("positions scaled into the disk")
}

/// Overdispersed starting state for chain `chain`.
pub fn initial_state<R: Rng + ?Sized>(
    domain: &SpatialDomain,
    hp: &Hyperparams,
    chain: usize,
    rng: &mut R,
) -> Result<ModelState> {
    let n = domain.n();
    let o = chain_offset(chain);
    let alpha = -1.0 + 0.75 * o;
    let gamma = hp
        .variant
        .pinned_gamma()
        .unwrap_or_else(|| (0.5 + 0.2 * o).clamp(0.05, 0.95));
    let nbr = NeighborhoodParams::new(alpha, gamma, DVector::zeros(domain.k()), hp.sigma2_z)?;
    let positions = initial_positions(&domain.y, rng);

    let adjacency = match (&domain.geo_adjacency, hp.variant) {
        (Some(geo), _) => AdjacencyState::from_matrix(geo)?,
        (None, Variant::Icar) => {
            return Err(Error::Config("the icar variant needs a geographic adjacency".into()))
        }
        (None, _) => {
            let p = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { crate::neighborhood::logistic(alpha) });
            sample_adjacency(&p, rng)?
        }
    };

    let beta = least_squares(&domain.x, &domain.y)?.map(|b| b + 0.25 * o);
    Ok(ModelState {
        adjacency,
        positions,
        nbr,
        beta,
        mu: domain.y.clone(),
        eps: RandomEffects::zeros(n),
        sigma2_mu: 0.5,
        sigma2_eps: 0.5,
    })
}

/// Draws every latent quantity from its prior, top to bottom.
///
/// Positions come from the disk-truncated Gaussian, which matches the
/// unnormalized position term of the joint only when there are no position
/// covariates.
pub fn sample_prior<R: Rng + ?Sized>(domain: &SpatialDomain, hp: &Hyperparams, rng: &mut R) -> Result<ModelState> {
    let normal = |rng: &mut R, var: f64| var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let alpha = normal(rng, hp.sigma2_alpha);
    let gamma = hp.variant.pinned_gamma().unwrap_or_else(|| rng.random());
    let delta = DVector::from_fn(domain.k(), |_, _| 0.0).map(|_| normal(rng, hp.sigma2_delta));
    let nbr = NeighborhoodParams::new(alpha, gamma, delta, hp.sigma2_z)?;
    let means: Vec<[f64; 2]> = domain.s.iter().map(|s| position_mean(s, &nbr.delta)).collect();
    let positions = sample_positions_prior(&means, hp.sigma2_z, rng);
    let adjacency = if hp.variant.learns_graph() {
        sample_adjacency(&edge_prob_matrix(&nbr, &positions, &domain.d1), rng)?
    } else {
        let geo = domain
            .geo_adjacency
            .as_ref()
            .ok_or_else(|| Error::Config("the icar variant needs a geographic adjacency".into()))?;
        AdjacencyState::from_matrix(geo)?
    };
    let sigma2_mu = InvGammaParams { shape: hp.a_mu, rate: hp.b_mu }.sample(rng);
    let sigma2_eps = InvGammaParams { shape: hp.a_eps, rate: hp.b_eps }.sample(rng);
    let beta = DVector::from_fn(domain.p(), |_, _| 0.0).map(|_| normal(rng, hp.sigma2_beta));
    let eps = sample_icar_prior(&adjacency, sigma2_eps, rng)?;
    let mean = &domain.x * &beta + eps.values();
    let mu = mean.map(|m| m + normal(rng, sigma2_mu));
    Ok(ModelState {
        adjacency,
        positions,
        nbr,
        beta,
        mu,
        eps,
        sigma2_mu,
        sigma2_eps,
    })
}

/// `Y ~ N(mu, diag(var_y))`.
pub fn sample_response<R: Rng + ?Sized>(state: &ModelState, domain: &SpatialDomain, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(domain.n(), |i, _| {
        state.mu[i] + domain.var_y[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
    })
}

/// One full sweep in the fixed update order.
pub fn sweep<R: Rng + ?Sized>(
    state: &mut ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
    settings: &RunSettings,
    steps: &StepSizes,
    rng: &mut R,
    ledger: &mut AcceptanceLedger,
) -> Result<()> {
    let frozen = &settings.frozen;
    if hp.variant.learns_graph() {
        flip_edges(state, domain, rng, settings.proposals(domain.n()), &mut ledger.flips)?;
    }
    if !frozen.positions {
        update_positions(state, domain, hp, rng, steps.position, &mut ledger.positions);
    }
    update_alpha_gamma(state, domain, hp, rng, steps, frozen, &mut ledger.alpha, &mut ledger.gamma);
    update_epsilon(state, domain, rng)?;
    update_delta_beta_mu(state, domain, hp, rng)?;
    if !frozen.variances {
        update_variances(state, domain, hp, rng);
    }
    Ok(())
}

fn adapt_step(step: &mut f64, before: RateCounter, after: RateCounter, sweep: usize, max: f64) {
    let proposed = after.proposed - before.proposed;
    if proposed == 0 {
        return;
    }
    let rate = (after.accepted - before.accepted) as f64 / proposed as f64;
    let gain = 1.0 / (sweep as f64 + 1.0).powf(0.6);
    *step = (step.ln() + gain * (rate - TARGET_ACCEPTANCE)).exp().clamp(1e-4, max);
}

/// Runs one chain. Without `init` the chain starts from
/// [`initial_state`] for chain 0.
pub fn run_chain(
    domain: &SpatialDomain,
    hp: &Hyperparams,
    settings: &RunSettings,
    init: Option<ModelState>,
) -> Result<ChainDraws> {
    run_chain_indexed(domain, hp, settings, init, 0)
}

fn run_chain_indexed(
    domain: &SpatialDomain,
    hp: &Hyperparams,
    settings: &RunSettings,
    init: Option<ModelState>,
    chain_index: usize,
) -> Result<ChainDraws> {
    hp.validate()?;
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut state = match init {
        Some(s) => s,
        None => initial_state(domain, hp, chain_index, &mut rng)?,
    };
    if let Some(g) = hp.variant.pinned_gamma() {
        state.nbr.gamma = g;
    }
    state.check_shapes(domain)?;
    let start = joint_logdensity(&state, domain, hp);
    if !start.is_finite() {
        return Err(Error::Numerical(format!("non-finite log-density at initialization ({start})")));
    }

    let n = domain.n();
    let mut steps = settings.step_sizes;
    let mut ledger = AcceptanceLedger::default();
    let mut draws = Vec::with_capacity(settings.kept());
    let mut edge_sum = DMatrix::zeros(n, n);
    for t in 0..settings.iterations {
        let before = ledger;
        sweep(&mut state, domain, hp, settings, &steps, &mut rng, &mut ledger)?;
        if settings.adapt && t < settings.burn_in {
            adapt_step(&mut steps.alpha, before.alpha, ledger.alpha, t, 5.0);
            adapt_step(&mut steps.gamma, before.gamma, ledger.gamma, t, 1.0);
            adapt_step(&mut steps.position, before.positions, ledger.positions, t, 1.0);
        }
        if t >= settings.burn_in && (t - settings.burn_in + 1).is_multiple_of(settings.thin) {
            let lp = joint_logdensity(&state, domain, hp);
            for (i, j) in state.adjacency.edges() {
                edge_sum[(i, j)] += 1.0;
                edge_sum[(j, i)] += 1.0;
            }
            draws.push(Draw::from_state(&state, lp));
        }
    }
    let kept = draws.len().max(1) as f64;
    Ok(ChainDraws {
        chain_index,
        seed: settings.seed,
        variant: hp.variant,
        draws,
        edge_freq: edge_sum / kept,
        acceptance: ledger,
        final_step_sizes: steps,
        final_state: state,
    })
}

/// Runs `n_chains` chains in parallel with seeds [`sub_seed`]`(seed, k)` and
/// overdispersed starting points.
pub fn run_chains(
    domain: &SpatialDomain,
    hp: &Hyperparams,
    settings: &RunSettings,
    n_chains: usize,
) -> Result<Vec<ChainDraws>> {
    if n_chains == 0 {
        return Err(Error::invalid("n_chains", "must be at least 1"));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|k| {
            let chain_settings = RunSettings {
                seed: sub_seed(settings.seed, k),
                ..settings.clone()
            };
            run_chain_indexed(domain, hp, &chain_settings, None, k)
        })
        .collect()
}
