//! Convergence diagnostics, latent-position alignment and posterior
//! summaries.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{monitored_parameters, ChainDraws};

pub const DEFAULT_THRESHOLD: f64 = 1.1;

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.ncols(), |j, _| x.column(j).mean())
}

/// Batch-means covariance of one or more chains with batch size `b`,
/// with batch means centered on `center`.
fn replicated_batch_means(chains: &[&DMatrix<f64>], b: usize, center: &DVector<f64>) -> DMatrix<f64> {
    let p = center.len();
    let mut acc = DMatrix::zeros(p, p);
    let mut batches = 0usize;
    for x in chains {
        let a = x.nrows() / b;
        for k in 0..a {
            let mean = DVector::from_fn(p, |j, _| x.view((k * b, j), (b, 1)).mean());
            let d = mean - center;
            acc += &d * d.transpose();
        }
        batches += a;
    }
    acc * (b as f64) / (batches as f64 - 1.0)
}

fn lugsail(chains: &[&DMatrix<f64>], b: usize, center: &DVector<f64>) -> DMatrix<f64> {
    let small = (b / 3).max(1);
    replicated_batch_means(chains, b, center) * 2.0 - replicated_batch_means(chains, small, center)
}

/// Default batch size `floor(sqrt(n))`.
pub fn default_batch_size(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}

/// Lugsail batch-means estimate `2 BM(b) - BM(floor(b/3))` of the long-run
/// covariance of an `n x p` chain.
pub fn lugsail_batch_cov(chain: &DMatrix<f64>, batch_size: usize) -> Result<DMatrix<f64>> {
    let n = chain.nrows();
    if batch_size == 0 || n < 2 * batch_size {
        return Err(Error::InsufficientDraws(format!(
            "{n} draws cannot form two batches of size {batch_size}"
        )));
    }
    let out = lugsail(&[chain], batch_size, &column_means(chain));
    Ok((&out + out.transpose()) * 0.5)
}

/// Sample covariance with an `n - 1` denominator.
pub fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - x.column(j).mean());
    centered.transpose() * &centered / (n as f64 - 1.0)
}

/// `sqrt((n - 1)/n + (det T / det S)^(1/p) / n)`.
pub fn psrf_from_parts(n: usize, t_hat: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let n = n as f64;
    let p = s.nrows() as f64;
    let ratio = (t_hat.determinant() / s.determinant()).powf(1.0 / p);
    ((n - 1.0) / n + ratio / n).sqrt()
}

/// First coordinate that makes the leading block of `s` singular.
fn degenerate_coordinate(s: &DMatrix<f64>) -> Option<usize> {
    let p = s.nrows();
    let scale = DVector::from_fn(p, |j, _| s[(j, j)].max(0.0).sqrt());
    for j in 0..p {
        if !(scale[j] > 1e-12 * (1.0 + scale.amax())) {
            return Some(j);
        }
        let corr = DMatrix::from_fn(j + 1, j + 1, |a, b| s[(a, b)] / (scale[a] * scale[b]));
        match corr.cholesky() {
            Some(c) if c.l_dirty().diagonal().iter().all(|d| *d > 1e-7) => {}
            _ => return Some(j),
        }
    }
    None
}

fn check_chains(chains: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    if chains.len() < 2 {
        return Err(Error::InsufficientDraws("need at least two chains".into()));
    }
    let (n, p) = chains[0].shape();
    for c in chains {
        if c.nrows() != n {
            return Err(Error::LengthMismatch { left: c.nrows(), right: n });
        }
        if c.ncols() != p {
            return Err(Error::LengthMismatch { left: c.ncols(), right: p });
        }
    }
    if p == 0 || n < 4 {
        return Err(Error::InsufficientDraws(format!("{n} draws of {p} parameters")));
    }
    Ok((n, p))
}

/// Multivariate potential scale reduction factor with coordinate names used
/// in error messages.
///
/// `S` is the average within-chain sample covariance. `T` is the lugsail
/// replicated batch-means covariance: batch means of every chain are
/// centered on the grand mean, so separated chains inflate it.
pub fn mpsrf_named(chains: &[DMatrix<f64>], names: &[String]) -> Result<f64> {
    let (n, p) = check_chains(chains)?;
    let m = chains.len() as f64;
    let mut s = DMatrix::zeros(p, p);
    let mut grand = DVector::zeros(p);
    for c in chains {
        s += sample_cov(c);
        grand += column_means(c);
    }
    s /= m;
    grand /= m;
    if let Some(index) = degenerate_coordinate(&s) {
        let name = names.get(index).cloned().unwrap_or_else(|| format!("x{index}"));
        return Err(Error::SingularCovariance { index, name });
    }
    let refs: Vec<&DMatrix<f64>> = chains.iter().collect();
    let b = default_batch_size(n);
    let mut t = lugsail(&refs, b, &grand);
    t = (&t + t.transpose()) * 0.5;
    if t.determinant() <= 0.0 {
        t = replicated_batch_means(&refs, b, &grand);
    }
    Ok(psrf_from_parts(n, &t, &s))
}

pub fn mpsrf(chains: &[DMatrix<f64>]) -> Result<f64> {
    mpsrf_named(chains, &[])
}

/// Univariate PSRF of each column.
pub fn psrf(chains: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let (_, p) = check_chains(chains)?;
    (0..p)
        .map(|j| {
            let cols: Vec<DMatrix<f64>> = chains.iter().map(|c| c.columns(j, 1).into_owned()).collect();
            match mpsrf(&cols) {
                Err(Error::SingularCovariance { .. }) => Ok(f64::NAN),
                other => other,
            }
        })
        .collect()
}

/// Effective sample size of each column: `m n S_jj / T_jj`.
pub fn effective_sample_size(chains: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let refs: Vec<&DMatrix<f64>> = chains.iter().collect();
    let n = chains.first().map_or(0, |c| c.nrows());
    let p = chains.first().map_or(0, |c| c.ncols());
    let total = (n * chains.len()) as f64;
    let mut grand = DVector::zeros(p);
    let mut s = DVector::zeros(p);
    for c in chains {
        grand += column_means(c);
        s += sample_cov(c).diagonal();
    }
    grand /= chains.len() as f64;
    s /= chains.len() as f64;
    let b = default_batch_size(n);
    if n < 2 * b || n < 4 {
        return Err(Error::InsufficientDraws(format!("{n} draws")));
    }
    let mut t = lugsail(&refs, b, &grand).diagonal();
    let fallback = replicated_batch_means(&refs, b, &grand).diagonal();
    for j in 0..p {
        if t[j] <= 0.0 {
            t[j] = fallback[j];
        }
    }
    Ok((0..p)
        .map(|j| if t[j] > 0.0 { total * s[j] / t[j] } else { f64::NAN })
        .collect())
}

/// Convergence summary for a set of chains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub parameters: Vec<String>,
    pub mpsrf: f64,
    pub psrf: Vec<f64>,
    pub ess: Vec<f64>,
    pub threshold: f64,
    pub passed: bool,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// True when a single chain was split into halves.
    pub split: bool,
}

/// Diagnostics for draws-by-parameter matrices, one per chain. A single
/// chain is split into two halves.
pub fn diagnose_matrices(chains: &[DMatrix<f64>], names: &[String], threshold: f64) -> Result<DiagnosticsReport> {
    let split = chains.len() == 1;
    let owned: Vec<DMatrix<f64>>;
    let chains = if split {
        let c = &chains[0];
        let half = c.nrows() / 2;
        owned = vec![c.rows(0, half).into_owned(), c.rows(c.nrows() - half, half).into_owned()];
        &owned[..]
    } else {
        chains
    };
    let value = mpsrf_named(chains, names)?;
    Ok(DiagnosticsReport {
        parameters: names.to_vec(),
        mpsrf: value,
        psrf: psrf(chains)?,
        ess: effective_sample_size(chains)?,
        threshold,
        passed: value < threshold,
        chains: chains.len(),
        draws_per_chain: chains[0].nrows(),
        split,
    })
}

/// Diagnostics over the freely moving scalar parameters of fitted chains.
pub fn diagnose(chains: &[ChainDraws], threshold: f64) -> Result<DiagnosticsReport> {
    let first = chains
        .first()
        .and_then(|c| c.draws.first())
        .ok_or_else(|| Error::InsufficientDraws("no retained draws".into()))?;
    let names = monitored_parameters(chains[0].variant, first.beta.len(), first.delta.len());
    let mats = chains
        .iter()
        .map(|c| c.scalar_matrix(&names))
        .collect::<Result<Vec<_>>>()?;
    diagnose_matrices(&mats, &names, threshold)
}

/// Centers `draw` and applies the orthogonal map (rotation or reflection)
/// that best matches it to the centered `reference` in Frobenius norm.
///
/// With `H = X^T Y = U S V^T` the optimum is `R = U V^T`.
fn align_one(reference: &DMatrix<f64>, draw: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = draw.len();
    let cx = draw.iter().map(|z| z[0]).sum::<f64>() / n as f64;
    let cy = draw.iter().map(|z| z[1]).sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, 2, |i, j| draw[i][j] - if j == 0 { cx } else { cy });
    let rotation = if x.amax() <= 1e-300 || reference.amax() <= 1e-300 {
        Matrix2::identity()
    } else {
        let h = x.transpose() * reference;
        let h = Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
        let svd = h.svd(true, true);
        match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => u * v_t,
            _ => Matrix2::identity(),
        }
    };
    (0..n)
        .map(|i| {
            let (a, b) = (x[(i, 0)], x[(i, 1)]);
            [a * rotation[(0, 0)] + b * rotation[(1, 0)], a * rotation[(0, 1)] + b * rotation[(1, 1)]]
        })
        .collect()
}

fn centered(points: &[[f64; 2]]) -> DMatrix<f64> {
    let n = points.len();
    let cx = points.iter().map(|z| z[0]).sum::<f64>() / n as f64;
    let cy = points.iter().map(|z| z[1]).sum::<f64>() / n as f64;
    DMatrix::from_fn(n, 2, |i, j| points[i][j] - if j == 0 { cx } else { cy })
}

/// Procrustes-aligns every draw onto `reference`.
pub fn procrustes_align(reference: &[[f64; 2]], draws: &[Vec<[f64; 2]>]) -> Result<Vec<Vec<[f64; 2]>>> {
    if reference.is_empty() {
        return Err(Error::InsufficientDraws("empty reference configuration".into()));
    }
    let r = centered(reference);
    draws
        .iter()
        .map(|d| {
            if d.len() != reference.len() {
                return Err(Error::LengthMismatch {
                    left: d.len(),
                    right: reference.len(),
                });
            }
            Ok(align_one(&r, d))
        })
        .collect()
}

/// Mean of the aligned draws, aligned on the last draw of the first chain.
pub fn mean_aligned_positions(chains: &[ChainDraws]) -> Result<Vec<[f64; 2]>> {
    let reference = chains
        .first()
        .and_then(|c| c.draws.last())
        .map(|d| d.positions.clone())
        .ok_or_else(|| Error::InsufficientDraws("no retained draws".into()))?;
    let all: Vec<Vec<[f64; 2]>> = chains
        .iter()
        .flat_map(|c| c.draws.iter().map(|d| d.positions.clone()))
        .collect();
    let aligned = procrustes_align(&reference, &all)?;
    let n = reference.len();
    let mut mean = vec![[0.0; 2]; n];
    for draw in &aligned {
        for (m, z) in mean.iter_mut().zip(draw) {
            m[0] += z[0];
            m[1] += z[1];
        }
    }
    let count = aligned.len() as f64;
    Ok(mean.into_iter().map(|m| [m[0] / count, m[1] / count]).collect())
}

/// Linear interpolation between order statistics: position `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientDraws("no draws to summarize".into()));
        }
        let n = values.len() as f64;
        let shift = values[0];
        let offset = values.iter().map(|v| v - shift).sum::<f64>() / n;
        let mean = shift + offset;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - shift - offset).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean,
            median: quantile_sorted(&sorted, 0.5),
            sd,
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
        })
    }
}

/// Pooled posterior summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub parameters: Vec<(String, Summary)>,
    /// Per-unit summaries of `mu`.
    pub units: Vec<Summary>,
    pub edge_freq: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn unit_medians(&self) -> DVector<f64> {
        DVector::from_iterator(self.units.len(), self.units.iter().map(|s| s.median))
    }

    pub fn parameter(&self, name: &str) -> Option<&Summary> {
        self.parameters.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

pub fn posterior_summary(chains: &[ChainDraws]) -> Result<PosteriorSummary> {
    let first = chains
        .iter()
        .find_map(|c| c.draws.first())
        .ok_or_else(|| Error::InsufficientDraws("no retained draws".into()))?;
    let names = monitored_parameters(chains[0].variant, first.beta.len(), first.delta.len());
    let draws: Vec<_> = chains.iter().flat_map(|c| c.draws.iter()).collect();
    let parameters = names
        .iter()
        .map(|name| {
            let v: Vec<f64> = draws.iter().filter_map(|d| d.scalar(name)).collect();
            Ok((name.clone(), Summary::of(&v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = first.mu.len();
    let units = (0..n)
        .map(|i| Summary::of(&draws.iter().map(|d| d.mu[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let total = draws.len() as f64;
    let mut edge_freq = DMatrix::zeros(n, n);
    for c in chains {
        edge_freq += &c.edge_freq * (c.len() as f64 / total);
    }
    Ok(PosteriorSummary {
        parameters,
        units,
        edge_freq,
    })
}
