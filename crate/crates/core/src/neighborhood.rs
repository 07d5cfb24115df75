//! Latent-space neighborhood model.
//!
//! Each unordered pair of units is a neighbor with probability
//! `logistic(alpha - gamma * d1 - (1 - gamma) * d2)`, where `d1` is the
//! geographic distance between normalized centroids and `d2` the distance
//! between latent positions `Z_i` in the closed unit disk.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gmrf::AdjacencyState;

const DISK_TOLERANCE: f64 = 1e-12;

/// Positions `Z` (q = 2), each row inside the closed unit disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPositions(Vec<[f64; 2]>);

impl LatentPositions {
    pub fn new(rows: Vec<[f64; 2]>) -> Result<Self> {
        for (i, z) in rows.iter().enumerate() {
            if !(z[0].is_finite() && z[1].is_finite()) {
                return Err(Error::NonFinite(format!("latent position {i}")));
            }
            if !in_disk(z) {
                return Err(Error::Constraint(format!(
                    "latent position {i} has norm {} > 1",
                    z[0].hypot(z[1])
                )));
            }
        }
        Ok(Self(rows))
    }

    pub fn origin(n: usize) -> Self {
        Self(vec![[0.0, 0.0]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn get(&self, i: usize) -> [f64; 2] {
        self.0[i]
    }

    /// Overwrites one row. Callers must keep it inside the disk.
    pub(crate) fn set(&mut self, i: usize, z: [f64; 2]) {
        debug_assert!(in_disk(&z));
        self.0[i] = z;
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.0[i], self.0[j]);
        (a[0] - b[0]).hypot(a[1] - b[1])
    }
}

pub fn in_disk(z: &[f64; 2]) -> bool {
    z[0].hypot(z[1]) <= 1.0 + DISK_TOLERANCE
}

/// Parameters of the edge model and the position prior.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodParams {
    pub alpha: f64,
    pub gamma: f64,
    pub delta: DVector<f64>,
    pub sigma2_z: f64,
}

impl NeighborhoodParams {
    pub fn new(alpha: f64, gamma: f64, delta: DVector<f64>, sigma2_z: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", format!("{gamma} outside [0, 1]")));
        }
        if !(sigma2_z > 0.0) {
            return Err(Error::invalid("sigma2_z", "must be positive"));
        }
        Ok(Self {
            alpha,
            gamma,
            delta,
            sigma2_z,
        })
    }

    pub fn logit(&self, d1_ij: f64, d2_ij: f64) -> f64 {
        edge_logit(self.alpha, self.gamma, d1_ij, d2_ij)
    }
}

/// `alpha - gamma * d1 - (1 - gamma) * d2`.
pub fn edge_logit(alpha: f64, gamma: f64, d1_ij: f64, d2_ij: f64) -> f64 {
    alpha - gamma * d1_ij - (1.0 - gamma) * d2_ij
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic(x))`, stable for large `|x|`.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Bernoulli log-mass of one indicator given its logit.
pub fn pair_logprob(edge: bool, logit: f64) -> f64 {
    if edge {
        log_logistic(logit)
    } else {
        log_logistic(-logit)
    }
}

/// Edge probabilities; zero on the diagonal.
pub fn edge_prob_matrix(
    params: &NeighborhoodParams,
    z: &LatentPositions,
    d1: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = z.len();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = logistic(params.logit(d1[(i, j)], z.distance(i, j)));
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    p
}

/// Thresholds one uniform per unordered pair: `B_ij = u_ij < p_ij`.
/// Only the strict upper triangle of `uniforms` is read.
pub fn adjacency_from_uniforms(p: &DMatrix<f64>, uniforms: &DMatrix<f64>) -> DMatrix<u8> {
    let n = p.nrows();
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if uniforms[(i, j)] < p[(i, j)] {
                b[(i, j)] = 1;
                b[(j, i)] = 1;
            }
        }
    }
    b
}

/// One uniform per unordered pair, drawn in row-major upper-triangle order.
pub fn pair_uniforms<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            u[(i, j)] = rng.random::<f64>();
        }
    }
    u
}

/// Independent Bernoulli draw of every upper-triangle indicator.
pub fn sample_adjacency<R: Rng + ?Sized>(p: &DMatrix<f64>, rng: &mut R) -> Result<AdjacencyState> {
    let u = pair_uniforms(p.nrows(), rng);
    AdjacencyState::from_matrix(&adjacency_from_uniforms(p, &u))
}

/// Bernoulli log-likelihood of all indicators `B_ij`, `i < j`.
pub fn adjacency_logprob(
    b: &AdjacencyState,
    params: &NeighborhoodParams,
    z: &LatentPositions,
    d1: &DMatrix<f64>,
) -> f64 {
    let n = b.n();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += pair_logprob(b.has_edge(i, j), params.logit(d1[(i, j)], z.distance(i, j)));
        }
    }
    total
}

/// Sum of the incident-pair terms of unit `i` with `Z_i` replaced by `zi`.
pub(crate) fn incident_logprob(
    b: &AdjacencyState,
    params: &NeighborhoodParams,
    z: &LatentPositions,
    d1: &DMatrix<f64>,
    i: usize,
    zi: [f64; 2],
) -> f64 {
    let mut total = 0.0;
    for (j, zj) in z.rows().iter().enumerate() {
        if j == i {
            continue;
        }
        let d2 = (zi[0] - zj[0]).hypot(zi[1] - zj[1]);
        total += pair_logprob(b.has_edge(i, j), params.logit(d1[(i, j)], d2));
    }
    total
}

/// Mean `S_i delta` of one unit's position prior.
pub fn position_mean(s_i: &DMatrix<f64>, delta: &DVector<f64>) -> [f64; 2] {
    if s_i.ncols() == 0 {
        return [0.0, 0.0];
    }
    let m = s_i * delta;
    [m[0], m[1]]
}

/// Log-density of `MVN_2(S_i delta, sigma2_z I)` at `zi`, or `-inf` outside the
/// disk. The truncation constant is omitted.
pub fn unit_position_logprior(zi: [f64; 2], mean: [f64; 2], sigma2_z: f64) -> f64 {
    if !in_disk(&zi) {
        return f64::NEG_INFINITY;
    }
    let q = (zi[0] - mean[0]).powi(2) + (zi[1] - mean[1]).powi(2);
    -(2.0 * PI * sigma2_z).ln() - q / (2.0 * sigma2_z)
}

/// Sum of [`unit_position_logprior`] over all units.
pub fn position_logprior(
    z: &LatentPositions,
    s: &[DMatrix<f64>],
    delta: &DVector<f64>,
    sigma2_z: f64,
) -> f64 {
    z.rows()
        .iter()
        .zip(s)
        .map(|(zi, si)| unit_position_logprior(*zi, position_mean(si, delta), sigma2_z))
        .sum()
}

/// Draws each `Z_i` from `MVN_2(mean_i, sigma2_z I)` restricted to the disk
/// by rejection.
pub fn sample_positions_prior<R: Rng + ?Sized>(
    means: &[[f64; 2]],
    sigma2_z: f64,
    rng: &mut R,
) -> LatentPositions {
    let sd = sigma2_z.sqrt();
    let rows = means
        .iter()
        .map(|m| loop {
            let z: [f64; 2] = [
                m[0] + sd * rng.sample::<f64, _>(rand_distr::StandardNormal),
                m[1] + sd * rng.sample::<f64, _>(rand_distr::StandardNormal),
            ];
            if in_disk(&z) {
                break z;
            }
        })
        .collect();
    LatentPositions(rows)
}
