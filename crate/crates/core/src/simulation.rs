//! Synthetic data generation and model-comparison studies.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::posterior_summary;
use crate::domain::{pairwise_distances, SpatialDomain};
use crate::error::{Error, Result};
use crate::gmrf::{sample_icar_prior, AdjacencyState, RandomEffects};
use crate::inference::{run_chains, sub_seed, Hyperparams, RunSettings, Variant};
use crate::neighborhood::{
    adjacency_from_uniforms, edge_prob_matrix, pair_uniforms, sample_positions_prior, LatentPositions,
    NeighborhoodParams,
};

const MAX_NETWORK_ATTEMPTS: usize = 100;

/// True parameters of one generating scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub gamma_true: f64,
    pub alpha_true: f64,
    pub beta_true: Vec<f64>,
    pub sigma2_eps_true: f64,
    pub sigma2_mu_true: f64,
    pub sigma2_y_true: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// The model-based study's setting with the given `gamma`.
    pub fn model_based(gamma: f64) -> Self {
        Self {
            name: format!("gamma={gamma}"),
            gamma_true: gamma,
            alpha_true: -2.5,
            beta_true: vec![-6.20, 2.5],
            sigma2_eps_true: 1.0,
            sigma2_mu_true: 0.12,
            sigma2_y_true: 0.12,
            replicates: 10,
            seed: 1,
        }
    }

    /// `gamma = 1`, `0.5` and `0`.
    pub fn model_based_all() -> Vec<Self> {
        [1.0, 0.5, 0.0].into_iter().map(Self::model_based).collect()
    }

    /// Parses `gamma=<value>` into a model-based scenario.
    pub fn parse(text: &str) -> Result<Self> {
        let value = text
            .trim()
            .strip_prefix("gamma=")
            .ok_or_else(|| Error::invalid("scenario", format!("expected gamma=<value>, got {text:?}")))?;
        let gamma: f64 = value
            .parse()
            .map_err(|_| Error::invalid("scenario", format!("bad gamma {value:?}")))?;
        let spec = Self::model_based(gamma);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma_true) {
            return Err(Error::invalid("gamma_true", format!("{} is outside [0, 1]", self.gamma_true)));
        }
        if !(self.sigma2_eps_true.is_finite() && self.sigma2_eps_true > 0.0) {
            return Err(Error::invalid("sigma2_eps_true", "must be positive"));
        }
        for (name, v) in [("sigma2_mu_true", self.sigma2_mu_true), ("sigma2_y_true", self.sigma2_y_true)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        if !self.alpha_true.is_finite() || self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("scenario parameters".into()));
        }
        Ok(())
    }
}

/// Centroids, design matrix and a geographic adjacency for synthetic studies.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub unit_ids: Vec<String>,
    pub centroids: Vec<[f64; 2]>,
    /// Intercept plus one covariate on the scale of log housing cost.
    pub x: DMatrix<f64>,
    pub geo_adjacency: DMatrix<u8>,
}

impl Geometry {
    /// A domain over this geometry with response `y` and sampling variances `var_y`.
    pub fn domain(&self, y: DVector<f64>, var_y: DVector<f64>) -> Result<SpatialDomain> {
        SpatialDomain::new(
            self.unit_ids.clone(),
            &self.centroids,
            y,
            var_y,
            self.x.clone(),
            None,
            Some(self.geo_adjacency.clone()),
        )
    }

    pub fn n(&self) -> usize {
        self.centroids.len()
    }
}

/// Symmetrized `k`-nearest-neighbor graph.
pub fn knn_adjacency(points: &[[f64; 2]], k: usize) -> Result<DMatrix<u8>> {
    let n = points.len();
    let d = pairwise_distances(points)?;
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &c| d[(i, a)].total_cmp(&d[(i, c)]).then(a.cmp(&c)));
        for &j in order.iter().take(k) {
            b[(i, j)] = 1;
            b[(j, i)] = 1;
        }
    }
    Ok(b)
}

/// `n` centroids uniform in the unit disk, a spatially drifting covariate
/// around 6.9 and a 4-nearest-neighbor geography.
pub fn synthetic_geometry(n: usize, seed: u64) -> Result<Geometry> {
    if n < 3 {
        return Err(Error::TooFewUnits(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let t = rng.random::<f64>() * std::f64::consts::TAU;
            [r * t.cos(), r * t.sin()]
        })
        .collect();
    let x = DMatrix::from_fn(n, 2, |i, j| {
        if j == 0 {
            1.0
        } else {
            let c = centroids[i];
            6.9 + 0.15 * c[0] - 0.1 * c[1] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        }
    });
    Ok(Geometry {
        unit_ids: (0..n).map(|i| format!("U{:03}", i + 1)).collect(),
        geo_adjacency: knn_adjacency(&centroids, 4)?,
        centroids,
        x,
    })
}

/// `Y*_i = y_i + sqrt(var_y_i) * N(0, 1)`, independently across units.
pub fn gen_pseudo_data<R: Rng + ?Sized>(y: &DVector<f64>, var_y: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| y[i] + var_y[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
}

/// Latent positions and adjacency drawn for a scenario.
#[derive(Debug, Clone)]
pub struct GeneratedNetwork {
    pub positions: LatentPositions,
    pub adjacency: AdjacencyState,
}

/// Adjacency implied by positions and fixed pair uniforms.
pub fn network_from_uniforms(
    spec: &ScenarioSpec,
    d1: &DMatrix<f64>,
    positions: &LatentPositions,
    uniforms: &DMatrix<f64>,
) -> Result<AdjacencyState> {
    let params = NeighborhoodParams::new(spec.alpha_true, spec.gamma_true, DVector::zeros(0), 1.0)?;
    let p = edge_prob_matrix(&params, positions, d1);
    AdjacencyState::from_matrix(&adjacency_from_uniforms(&p, uniforms))
}

/// Draws positions from the standard latent prior and the adjacency from
/// the edge model, redrawing graphs with no edges at all.
pub fn gen_network<R: Rng + ?Sized>(spec: &ScenarioSpec, d1: &DMatrix<f64>, rng: &mut R) -> Result<GeneratedNetwork> {
    spec.validate()?;
    let n = d1.nrows();
    for _ in 0..MAX_NETWORK_ATTEMPTS {
        let positions = sample_positions_prior(&vec![[0.0, 0.0]; n], 1.0, rng);
        let uniforms = pair_uniforms(n, rng);
        let adjacency = network_from_uniforms(spec, d1, &positions, &uniforms)?;
        if adjacency.edge_count() > 0 {
            return Ok(GeneratedNetwork { positions, adjacency });
        }
    }
    Err(Error::Simulation(format!(
        "every unit isolated in {MAX_NETWORK_ATTEMPTS} generated graphs"
    )))
}

/// One dataset drawn given a graph.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub eps: RandomEffects,
    pub mu: DVector<f64>,
    pub y: DVector<f64>,
}

/// `eps ~ ICAR(B, s_eps)`, `mu = X beta + eps + N(0, s_mu)`, `Y = mu + N(0, s_y)`.
pub fn gen_data<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    x: &DMatrix<f64>,
    adjacency: &AdjacencyState,
    rng: &mut R,
) -> Result<GeneratedData> {
    if x.ncols() != spec.beta_true.len() {
        return Err(Error::LengthMismatch {
            left: x.ncols(),
            right: spec.beta_true.len(),
        });
    }
    let eps = sample_icar_prior(adjacency, spec.sigma2_eps_true, rng)?;
    let beta = DVector::from_column_slice(&spec.beta_true);
    let mean = x * beta + eps.values();
    let mu = mean.map(|m| m + spec.sigma2_mu_true.sqrt() * rng.sample::<f64, _>(StandardNormal));
    let y = mu.map(|m| m + spec.sigma2_y_true.sqrt() * rng.sample::<f64, _>(StandardNormal));
    Ok(GeneratedData { eps, mu, y })
}

/// Network followed by one dataset.
pub fn gen_scenario<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    geometry: &Geometry,
    rng: &mut R,
) -> Result<(GeneratedNetwork, GeneratedData)> {
    let d1 = crate::domain::pairwise_distances(&crate::domain::normalize_to_unit_disk(&geometry.centroids)?)?;
    let network = gen_network(spec, &d1, rng)?;
    let data = gen_data(spec, &geometry.x, &network.adjacency, rng)?;
    Ok((network, data))
}

/// Mean squared and mean absolute difference.
pub fn score(truth: &[f64], fitted: &[f64]) -> Result<(f64, f64)> {
    if truth.len() != fitted.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: fitted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InsufficientDraws("nothing to score".into()));
    }
    let n = truth.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (t, f) in truth.iter().zip(fitted) {
        se += (t - f).powi(2);
        ae += (t - f).abs();
    }
    Ok((se / n, ae / n))
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::diagnostics::quantile_sorted(&v, 0.5)
}

/// Scores of one (scenario, variant) pair across replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreCell {
    pub scenario: String,
    pub variant: Variant,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    pub failures: Vec<String>,
}

impl ScoreCell {
    pub fn replicate_count(&self) -> usize {
        self.mse.len()
    }

    pub fn mse_median(&self) -> f64 {
        median(&self.mse)
    }

    pub fn mae_median(&self) -> f64 {
        median(&self.mae)
    }

    pub fn failed(&self) -> bool {
        self.mse.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTable {
    pub cells: Vec<ScoreCell>,
}

impl ScoreTable {
    pub fn cell(&self, scenario: &str, variant: Variant) -> Option<&ScoreCell> {
        self.cells.iter().find(|c| c.scenario == scenario && c.variant == variant)
    }

    /// `scenario,variant,replicate_count,mse_median,mae_median`; failed cells
    /// carry `failed` in both score columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,variant,replicate_count,mse_median,mae_median\n");
        for c in &self.cells {
            if c.failed() {
                let _ = writeln!(out, "{},{},0,failed,failed", c.scenario, c.variant);
            } else {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.16e},{:.16e}",
                    c.scenario,
                    c.variant,
                    c.replicate_count(),
                    c.mse_median(),
                    c.mae_median()
                );
            }
        }
        out
    }
}

/// Fitting and sizing of a comparison study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub n_units: usize,
    pub n_chains: usize,
    pub run: RunSettings,
    pub hyperparams: Hyperparams,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            n_units: 67,
            n_chains: 2,
            run: RunSettings {
                iterations: 4_000,
                burn_in: 2_000,
                ..RunSettings::default()
            },
            hyperparams: Hyperparams::default(),
        }
    }
}

/// Fits `variant` to `domain` and scores the posterior medians of `mu`
/// against `truth`.
pub fn fit_and_score(
    domain: &SpatialDomain,
    variant: Variant,
    truth: &[f64],
    settings: &StudySettings,
    seed: u64,
) -> Result<(f64, f64)> {
    let hp = Hyperparams {
        variant,
        ..settings.hyperparams.clone()
    };
    let run = RunSettings {
        seed,
        ..settings.run.clone()
    };
    let chains = run_chains(domain, &hp, &run, settings.n_chains)?;
    let summary = posterior_summary(&chains)?;
    score(truth, summary.unit_medians().as_slice())
}

/// Replicate index, variant and its `(mse, mae)`.
type FitOutcome = (usize, Variant, Result<(f64, f64)>);

fn variant_index(v: Variant) -> usize {
    Variant::ALL.iter().position(|x| *x == v).unwrap_or(0)
}

fn collect_cells(
    scenario: &str,
    variants: &[Variant],
    results: Vec<FitOutcome>,
) -> Vec<ScoreCell> {
    variants
        .iter()
        .map(|&variant| {
            let mut cell = ScoreCell {
                scenario: scenario.to_string(),
                variant,
                mse: Vec::new(),
                mae: Vec::new(),
                failures: Vec::new(),
            };
            for (rep, v, res) in &results {
                if *v != variant {
                    continue;
                }
                match res {
                    Ok((mse, mae)) => {
                        cell.mse.push(*mse);
                        cell.mae.push(*mae);
                    }
                    Err(e) => cell.failures.push(format!("replicate {rep}: {e}")),
                }
            }
            cell
        })
        .collect()
}

/// The scenario network drawn on `geometry` from `scenario_seed`.
pub fn scenario_network(spec: &ScenarioSpec, geometry: &Geometry, scenario_seed: u64) -> Result<GeneratedNetwork> {
    spec.validate()?;
    let probe = geometry.domain(DVector::zeros(geometry.n()), DVector::from_element(geometry.n(), 1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed);
    gen_network(spec, &probe.d1, &mut rng)
}

/// Dataset `replicate` of a scenario.
pub fn replicate_data(
    spec: &ScenarioSpec,
    geometry: &Geometry,
    network: &GeneratedNetwork,
    scenario_seed: u64,
    replicate: usize,
) -> Result<GeneratedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(scenario_seed, replicate));
    gen_data(spec, &geometry.x, &network.adjacency, &mut rng)
}

/// Geometry, network and one dataset seeded as the `scenario_index`-th
/// scenario of [`run_comparison`] with master seed `master`.
pub fn comparison_dataset(
    spec: &ScenarioSpec,
    n_units: usize,
    master: u64,
    scenario_index: usize,
    replicate: usize,
) -> Result<(Geometry, GeneratedNetwork, GeneratedData)> {
    let geometry = synthetic_geometry(n_units, sub_seed(master, 0))?;
    let scenario_seed = sub_seed(master, 1 + scenario_index);
    let network = scenario_network(spec, &geometry, scenario_seed)?;
    let data = replicate_data(spec, &geometry, &network, scenario_seed, replicate)?;
    Ok((geometry, network, data))
}

/// Model-based study: for every scenario, one network on the synthetic
/// geometry, then `replicates` datasets, each fitted by every variant and
/// scored against the generated responses.
pub fn run_comparison(
    scenarios: &[ScenarioSpec],
    variants: &[Variant],
    replicates: usize,
    settings: &StudySettings,
) -> Result<ScoreTable> {
    if scenarios.is_empty() || variants.is_empty() || replicates == 0 {
        return Err(Error::invalid("comparison", "needs scenarios, variants and replicates"));
    }
    let master = settings.run.seed;
    let geometry = synthetic_geometry(settings.n_units, sub_seed(master, 0))?;
    let mut cells = Vec::new();
    for (si, spec) in scenarios.iter().enumerate() {
        let scenario_seed = sub_seed(master, 1 + si);
        let network = scenario_network(spec, &geometry, scenario_seed)?;
        let datasets = (0..replicates)
            .map(|r| replicate_data(spec, &geometry, &network, scenario_seed, r))
            .collect::<Result<Vec<_>>>()?;
        let var_y = DVector::from_element(geometry.n(), spec.sigma2_y_true.max(1e-12));
        let jobs: Vec<(usize, Variant)> = (0..replicates)
            .flat_map(|r| variants.iter().map(move |&v| (r, v)))
            .collect();
        let results: Vec<FitOutcome> = jobs
            .par_iter()
            .map(|&(r, v)| {
                let data = &datasets[r];
                let res = geometry.domain(data.y.clone(), var_y.clone()).and_then(|domain| {
                    let seed = sub_seed(sub_seed(scenario_seed, r), 100 + variant_index(v));
                    fit_and_score(&domain, v, data.y.as_slice(), settings, seed)
                });
                (r, v, res)
            })
            .collect();
        cells.extend(collect_cells(&spec.name, variants, results));
    }
    Ok(ScoreTable { cells })
}

/// A stand-in for the survey dataset: log-scale responses drawn from the
/// model with both distances active, plus design-based sampling variances
/// of a few percent.
pub fn standin_survey_domain(n: usize, seed: u64) -> Result<SpatialDomain> {
    let geometry = synthetic_geometry(n, seed)?;
    let spec = ScenarioSpec {
        name: "standin".into(),
        gamma_true: 0.5,
        alpha_true: -2.5,
        beta_true: vec![-6.20, 2.5],
        sigma2_eps_true: 0.05,
        sigma2_mu_true: 0.01,
        sigma2_y_true: 0.0,
        replicates: 1,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let (_, data) = gen_scenario(&spec, &geometry, &mut rng)?;
    let var_y = DVector::from_fn(n, |_, _| (0.02 + 0.04 * rng.random::<f64>()).powi(2));
    geometry.domain(data.y, var_y)
}

/// Empirical study: pseudo-datasets centered at `base.y` with variances
/// `base.var_y`, each fitted by every variant and scored against itself.
pub fn run_empirical_study(
    base: &SpatialDomain,
    variants: &[Variant],
    replicates: usize,
    settings: &StudySettings,
) -> Result<ScoreTable> {
    if variants.is_empty() || replicates == 0 {
        return Err(Error::invalid("empirical study", "needs variants and replicates"));
    }
    let master = settings.run.seed;
    let datasets: Vec<DVector<f64>> = (0..replicates)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(master, r));
            gen_pseudo_data(&base.y, &base.var_y, &mut rng)
        })
        .collect();
    let jobs: Vec<(usize, Variant)> = (0..replicates)
        .flat_map(|r| variants.iter().map(move |&v| (r, v)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(r, v)| {
            let y = &datasets[r];
            let res = base.with_response(y.clone()).and_then(|domain| {
                let seed = sub_seed(sub_seed(master, r), 100 + variant_index(v));
                fit_and_score(&domain, v, y.as_slice(), settings, seed)
            });
            (r, v, res)
        })
        .collect();
    Ok(ScoreTable {
        cells: collect_cells("empirical", variants, results),
    })
}
