use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::domain::SpatialDomain;
use crate::error::{Error, Result};
use crate::gmrf::sample_epsilon_conditional;
use crate::neighborhood::{
    adjacency_logprob, incident_logprob, position_mean, unit_position_logprior, NeighborhoodParams,
};

use super::chain::RateCounter;
use super::flips::FlipCache;
use super::{normal_logpdf, Frozen, Hyperparams, ModelState, StepSizes};

/// Draws from `N(P^{-1} h, P^{-1})`; returns the draw and the mean.
fn sample_precision_form<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    h: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Numerical("conditional precision is not positive definite".into()))?;
    let mean = chol.solve(h);
    let z = DVector::from_fn(h.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok((mean.clone() + noise, mean))
}

/// Runs `n_proposals` single-pair toggles, each accepted by Metropolis
/// against the collapsed posterior.
pub fn flip_edges<R: Rng + ?Sized>(
    state: &mut ModelState,
    domain: &SpatialDomain,
    rng: &mut R,
    n_proposals: usize,
    counter: &mut RateCounter,
) -> Result<()> {
    let n = domain.n();
    state.adjacency.refresh()?;
    let mut cache = FlipCache::new(state, domain)?;
    for _ in 0..n_proposals {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let proposal = cache.propose(state, domain, i, j);
        let accept = rng.random::<f64>().ln() < proposal.log_ratio;
        counter.record(accept);
        if accept {
            cache.accept(state, &proposal)?;
        }
    }
    Ok(())
}

/// Log acceptance ratio for moving `alpha` to `alpha_new`.
pub fn alpha_log_ratio(state: &ModelState, domain: &SpatialDomain, hp: &Hyperparams, alpha_new: f64) -> f64 {
    let mut proposed = state.nbr.clone();
    proposed.alpha = alpha_new;
    let like = adjacency_logprob(&state.adjacency, &proposed, &state.positions, &domain.d1)
        - adjacency_logprob(&state.adjacency, &state.nbr, &state.positions, &domain.d1);
    like + normal_logpdf(alpha_new, 0.0, hp.sigma2_alpha) - normal_logpdf(state.nbr.alpha, 0.0, hp.sigma2_alpha)
}

/// Log acceptance ratio for moving `gamma` to `gamma_new`; the uniform
/// prior contributes nothing inside `[0, 1]`.
pub fn gamma_log_ratio(state: &ModelState, domain: &SpatialDomain, gamma_new: f64) -> f64 {
    if !(0.0..=1.0).contains(&gamma_new) {
        return f64::NEG_INFINITY;
    }
    let mut proposed = state.nbr.clone();
    proposed.gamma = gamma_new;
    adjacency_logprob(&state.adjacency, &proposed, &state.positions, &domain.d1)
        - adjacency_logprob(&state.adjacency, &state.nbr, &state.positions, &domain.d1)
}

/// Folds the real line onto `[0, 1]` by repeated reflection at 0 and 1.
pub fn reflect_unit(x: f64) -> f64 {
    let y = x.rem_euclid(2.0);
    if y > 1.0 {
        2.0 - y
    } else {
        y
    }
}

#[allow(clippy::too_many_arguments)]
pub fn update_alpha_gamma<R: Rng + ?Sized>(
    state: &mut ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
    rng: &mut R,
    steps: &StepSizes,
    frozen: &Frozen,
    alpha_counter: &mut RateCounter,
    gamma_counter: &mut RateCounter,
) {
    if !hp.variant.learns_graph() {
        return;
    }
    if !frozen.alpha {
        let proposal = state.nbr.alpha + steps.alpha * rng.sample::<f64, _>(StandardNormal);
        let ratio = alpha_log_ratio(state, domain, hp, proposal);
        let accept = rng.random::<f64>().ln() < ratio;
        alpha_counter.record(accept);
        if accept {
            state.nbr.alpha = proposal;
        }
    }
    if !frozen.gamma && hp.variant.pinned_gamma().is_none() {
        let proposal = reflect_unit(state.nbr.gamma + steps.gamma * rng.sample::<f64, _>(StandardNormal));
        let ratio = gamma_log_ratio(state, domain, proposal);
        let accept = rng.random::<f64>().ln() < ratio;
        gamma_counter.record(accept);
        if accept {
            state.nbr.gamma = proposal;
        }
    }
}

/// Log acceptance ratio for moving unit `i` to `zi_new`: its prior term plus
/// its `N - 1` incident Bernoulli terms.
pub fn position_log_ratio(
    state: &ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
    i: usize,
    zi_new: [f64; 2],
) -> f64 {
    let mean = position_mean(&domain.s[i], &state.nbr.delta);
    let new_prior = unit_position_logprior(zi_new, mean, hp.sigma2_z);
    if new_prior == f64::NEG_INFINITY {
        return new_prior;
    }
    let zi = state.positions.get(i);
    let old_prior = unit_position_logprior(zi, mean, hp.sigma2_z);
    let b = &state.adjacency;
    new_prior - old_prior + incident_logprob(b, &state.nbr, &state.positions, &domain.d1, i, zi_new)
        - incident_logprob(b, &state.nbr, &state.positions, &domain.d1, i, zi)
}

/// One random-walk Metropolis step per unit, in index order.
pub fn update_positions<R: Rng + ?Sized>(
    state: &mut ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
    rng: &mut R,
    step: f64,
    counter: &mut RateCounter,
) {
    if !hp.variant.moves_positions() {
        return;
    }
    for i in 0..domain.n() {
        let zi = state.positions.get(i);
        let proposal = [
            zi[0] + step * rng.sample::<f64, _>(StandardNormal),
            zi[1] + step * rng.sample::<f64, _>(StandardNormal),
        ];
        let ratio = position_log_ratio(state, domain, hp, i, proposal);
        let accept = rng.random::<f64>().ln() < ratio;
        counter.record(accept);
        if accept {
            state.positions.set(i, proposal);
        }
    }
}

pub fn update_epsilon<R: Rng + ?Sized>(state: &mut ModelState, domain: &SpatialDomain, rng: &mut R) -> Result<()> {
    let xb = state.linear_predictor(domain);
    state.eps = sample_epsilon_conditional(
        &state.mu,
        &xb,
        &state.adjacency,
        state.sigma2_eps,
        state.sigma2_mu,
        rng,
    )?;
    Ok(())
}

/// Precision and linear term of `beta | mu, eps, sigma2_mu`:
/// `P = X^T X / s_mu + I / s_beta`, `h = X^T (mu - eps) / s_mu`.
fn beta_precision_form(state: &ModelState, domain: &SpatialDomain, hp: &Hyperparams) -> (DMatrix<f64>, DVector<f64>) {
    let x = &domain.x;
    let p = x.ncols();
    let s = state.sigma2_mu;
    let precision = x.transpose() * x / s + DMatrix::identity(p, p) / hp.sigma2_beta;
    let h = x.transpose() * (&state.mu - state.eps.values()) / s;
    (precision, h)
}

/// Mean and covariance of `beta`'s full conditional.
pub fn beta_conditional(state: &ModelState, domain: &SpatialDomain, hp: &Hyperparams) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (precision, h) = beta_precision_form(state, domain, hp);
    let cov = precision
        .try_inverse()
        .ok_or_else(|| Error::Numerical("beta precision is singular".into()))?;
    Ok((&cov * h, cov))
}

/// Per-unit mean and variance of `mu`'s full conditional:
/// precision `1/var_y + 1/s_mu`, mean `(y/var_y + (X beta + eps)/s_mu) / precision`.
pub fn mu_conditional(state: &ModelState, domain: &SpatialDomain) -> (DVector<f64>, DVector<f64>) {
    let fitted = state.linear_predictor(domain) + state.eps.values();
    let n = domain.n();
    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for i in 0..n {
        let prec = 1.0 / domain.var_y[i] + 1.0 / state.sigma2_mu;
        var[i] = 1.0 / prec;
        mean[i] = (domain.y[i] / domain.var_y[i] + fitted[i] / state.sigma2_mu) / prec;
    }
    (mean, var)
}

/// Gibbs draws of `delta`, then `beta`, then `mu`.
///
/// `delta | Z` has precision `sum_i S_i^T S_i / s_z + I / s_delta` and linear
/// term `sum_i S_i^T Z_i / s_z`; this ignores the disk-truncation constant,
/// matching [`super::joint_logdensity`].
pub fn update_delta_beta_mu<R: Rng + ?Sized>(
    state: &mut ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    let k = domain.k();
    if k > 0 && hp.variant.moves_positions() {
        let mut precision = DMatrix::identity(k, k) / hp.sigma2_delta;
        let mut h = DVector::zeros(k);
        for (si, zi) in domain.s.iter().zip(state.positions.rows()) {
            precision += si.transpose() * si / hp.sigma2_z;
            h += si.transpose() * DVector::from_column_slice(zi) / hp.sigma2_z;
        }
        let (draw, _) = sample_precision_form(precision, &h, rng)?;
        state.nbr = NeighborhoodParams {
            delta: draw,
            ..state.nbr.clone()
        };
    }

    let (precision, h) = beta_precision_form(state, domain, hp);
    state.beta = sample_precision_form(precision, &h, rng)?.0;

    let (mean, var) = mu_conditional(state, domain);
    for i in 0..domain.n() {
        state.mu[i] = mean[i] + var[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(())
}

/// Shape and rate of an inverse-gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl InvGammaParams {
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("positive inverse-gamma parameters");
        1.0 / g.sample(rng)
    }
}

/// Full conditionals of `(sigma2_mu, sigma2_eps)`:
/// `IG(a_mu + N/2, b_mu + |mu - X beta - eps|^2 / 2)` and
/// `IG(a_eps + (N - c)/2, b_eps + eps^T L eps / 2)`.
pub fn variance_conditionals(
    state: &ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
) -> (InvGammaParams, InvGammaParams) {
    let n = domain.n() as f64;
    let resid = state.residual(domain) - state.eps.values();
    let mu = InvGammaParams {
        shape: hp.a_mu + n / 2.0,
        rate: hp.b_mu + resid.norm_squared() / 2.0,
    };
    let rank = (domain.n() - state.adjacency.n_components()) as f64;
    let eps = InvGammaParams {
        shape: hp.a_eps + rank / 2.0,
        rate: hp.b_eps + state.adjacency.quadratic_form(state.eps.as_slice()) / 2.0,
    };
    (mu, eps)
}

pub fn update_variances<R: Rng + ?Sized>(
    state: &mut ModelState,
    domain: &SpatialDomain,
    hp: &Hyperparams,
    rng: &mut R,
) {
    let (mu, _) = variance_conditionals(state, domain, hp);
    state.sigma2_mu = mu.sample(rng);
    let (_, eps) = variance_conditionals(state, domain, hp);
    state.sigma2_eps = eps.sample(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::{AdjacencyState, RandomEffects};
    use crate::inference::testutil::{random_state, toy_domain};
    use crate::inference::{joint_logdensity, Variant};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_gamma_ratios_match_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let domain = toy_domain(8, 1, 10);
        let hp = Hyperparams::default();
        for _ in 0..100 {
            let state = random_state(&domain, &hp, 0.3, &mut rng);
            let before = joint_logdensity(&state, &domain, &hp);

            let a_new = state.nbr.alpha + rng.random_range(-1.0..1.0);
            let mut moved = state.clone();
            moved.nbr.alpha = a_new;
            let diff = joint_logdensity(&moved, &domain, &hp) - before;
            assert_abs_diff_eq!(alpha_log_ratio(&state, &domain, &hp, a_new), diff, epsilon = 1e-10);

            let g_new: f64 = rng.random();
            let mut moved = state.clone();
            moved.nbr.gamma = g_new;
            let diff = joint_logdensity(&moved, &domain, &hp) - before;
            assert_abs_diff_eq!(gamma_log_ratio(&state, &domain, g_new), diff, epsilon = 1e-10);
        }
    }

    #[test]
    fn unchanged_proposals_have_zero_log_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let domain = toy_domain(6, 0, 11);
        let hp = Hyperparams::default();
        let state = random_state(&domain, &hp, 0.3, &mut rng);
        assert_eq!(alpha_log_ratio(&state, &domain, &hp, state.nbr.alpha), 0.0);
        assert_eq!(gamma_log_ratio(&state, &domain, state.nbr.gamma), 0.0);
        assert_eq!(position_log_ratio(&state, &domain, &hp, 2, state.positions.get(2)), 0.0);
    }

    #[test]
    fn reflection_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut g = 0.5;
        for _ in 0..1_000_000 {
            g = reflect_unit(g + 0.7 * rng.sample::<f64, _>(StandardNormal));
            assert!((0.0..=1.0).contains(&g));
        }
        assert_abs_diff_eq!(reflect_unit(1.25), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(reflect_unit(-0.25), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(reflect_unit(2.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn position_ratio_matches_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let domain = toy_domain(8, 1, 12);
        let hp = Hyperparams::default();
        for _ in 0..100 {
            let state = random_state(&domain, &hp, 0.3, &mut rng);
            let i = rng.random_range(0..8);
            let zi = state.positions.get(i);
            let prop = [zi[0] + rng.random_range(-0.2..0.2), zi[1] + rng.random_range(-0.2..0.2)];
            let ratio = position_log_ratio(&state, &domain, &hp, i, prop);
            let mut moved = state.clone();
            if ratio == f64::NEG_INFINITY {
                continue;
            }
            moved.positions.set(i, prop);
            let diff = joint_logdensity(&moved, &domain, &hp) - joint_logdensity(&state, &domain, &hp);
            assert_abs_diff_eq!(ratio, diff, epsilon = 1e-10);
        }
    }

    #[test]
    fn position_outside_disk_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let domain = toy_domain(5, 0, 13);
        let hp = Hyperparams::default();
        let state = random_state(&domain, &hp, 0.3, &mut rng);
        assert_eq!(position_log_ratio(&state, &domain, &hp, 0, [1.5, 0.0]), f64::NEG_INFINITY);

        let mut moved = state.clone();
        let mut counter = RateCounter::default();
        let mut big_step = ChaCha8Rng::seed_from_u64(1);
        update_positions(&mut moved, &domain, &hp, &mut big_step, 50.0, &mut counter);
        assert_eq!(moved.positions, state.positions);
        assert_eq!(counter.accepted, 0);
    }

    #[test]
    fn geographic_only_position_ratio_is_prior_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let domain = toy_domain(6, 0, 14);
        let hp = Hyperparams::default();
        let mut state = random_state(&domain, &hp, 0.4, &mut rng);
        state.nbr.gamma = 1.0;
        let zi = state.positions.get(3);
        let prop = [zi[0] * 0.5 + 0.1, zi[1] * 0.5 - 0.1];
        let prior = |z: [f64; 2]| unit_position_logprior(z, [0.0, 0.0], hp.sigma2_z);
        assert_abs_diff_eq!(
            position_log_ratio(&state, &domain, &hp, 3, prop),
            prior(prop) - prior(zi),
            epsilon = 1e-12
        );
    }

    #[test]
    fn mu_collapses_to_data_when_sampling_variance_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut domain = toy_domain(5, 0, 15);
        domain.var_y = DVector::from_element(5, 1e-12);
        let hp = Hyperparams::default();
        let state = random_state(&domain, &hp, 0.3, &mut rng);
        let (mean, var) = mu_conditional(&state, &domain);
        for i in 0..5 {
            assert!((mean[i] - domain.y[i]).abs() < 1e-9);
            assert!(var[i] <= 1e-12);
        }
    }

    #[test]
    fn intercept_only_beta_is_shrunk_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let base = toy_domain(6, 0, 16);
        let mut domain = base.clone();
        domain.x = DMatrix::from_element(6, 1, 1.0);
        let hp = Hyperparams {
            sigma2_beta: 2.0,
            ..Hyperparams::default()
        };
        let mut state = random_state(&base, &hp, 0.3, &mut rng);
        state.beta = DVector::zeros(1);
        let (mean, cov) = beta_conditional(&state, &domain, &hp).unwrap();
        let total: f64 = (&state.mu - state.eps.values()).sum();
        let prec = 6.0 / state.sigma2_mu + 1.0 / hp.sigma2_beta;
        assert_abs_diff_eq!(cov[(0, 0)], 1.0 / prec, epsilon = 1e-12);
        assert_abs_diff_eq!(mean[0], total / state.sigma2_mu / prec, epsilon = 1e-12);
    }

    #[test]
    fn location_draws_match_conditional_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let domain = toy_domain(6, 1, 17);
        let hp = Hyperparams::default();
        let state = random_state(&domain, &hp, 0.3, &mut rng);
        let (beta_mean, beta_cov) = beta_conditional(&state, &domain, &hp).unwrap();
        let draws = 50_000;
        let mut sum = DVector::zeros(2);
        let mut sq = DVector::zeros(2);
        let mut mu_sum = DVector::zeros(6);
        for _ in 0..draws {
            let mut s = state.clone();
            update_delta_beta_mu(&mut s, &domain, &hp, &mut rng).unwrap();
            sum += &s.beta;
            sq += s.beta.component_mul(&s.beta);
            mu_sum += &s.mu;
        }
        let m = &sum / draws as f64;
        for j in 0..2 {
            let sd = beta_cov[(j, j)].sqrt();
            let v = sq[j] / draws as f64 - m[j] * m[j];
            assert!((m[j] - beta_mean[j]).abs() < 0.02 * beta_mean[j].abs().max(sd));
            assert!((v / beta_cov[(j, j)] - 1.0).abs() < 0.02);
        }
        // mu is drawn after beta, so its marginal mean shifts by X E[beta].
        let mut expected = state.clone();
        expected.beta = beta_mean;
        let (mu_mean, mu_var) = mu_conditional(&expected, &domain);
        let mu_hat = mu_sum / draws as f64;
        for i in 0..6 {
            assert!((mu_hat[i] - mu_mean[i]).abs() < 0.02 * mu_mean[i].abs().max(mu_var[i].sqrt()));
        }
    }

    #[test]
    fn variance_rates_with_zero_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let domain = toy_domain(5, 0, 18);
        let hp = Hyperparams::default();
        let mut state = random_state(&domain, &hp, 0.0, &mut rng);
        state.adjacency = AdjacencyState::empty(5);
        state.eps = RandomEffects::zeros(5);
        state.mu = state.linear_predictor(&domain);
        let (mu, eps) = variance_conditionals(&state, &domain, &hp);
        assert_eq!(mu.rate, hp.b_mu);
        assert_eq!(mu.shape, hp.a_mu + 2.5);
        assert_eq!(eps.shape, hp.a_eps);
        assert_eq!(eps.rate, hp.b_eps);
    }

    #[test]
    fn variance_draws_match_inverse_gamma_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let domain = toy_domain(7, 0, 19);
        let hp = Hyperparams::default();
        let state = random_state(&domain, &hp, 0.5, &mut rng);
        let (mu, eps) = variance_conditionals(&state, &domain, &hp);
        let draws = 50_000;
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..draws {
            a += mu.sample(&mut rng);
            b += eps.sample(&mut rng);
        }
        assert!((a / draws as f64 / mu.mean().unwrap() - 1.0).abs() < 0.02);
        assert!((b / draws as f64 / eps.mean().unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn pinned_variants_never_move_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let domain = toy_domain(6, 0, 20);
        for variant in [Variant::Nn, Variant::Sd] {
            let hp = Hyperparams::with_variant(variant);
            let mut state = random_state(&domain, &hp, 0.3, &mut rng);
            let (mut ca, mut cg) = (RateCounter::default(), RateCounter::default());
            for _ in 0..200 {
                update_alpha_gamma(
                    &mut state,
                    &domain,
                    &hp,
                    &mut rng,
                    &StepSizes::default(),
                    &Frozen::default(),
                    &mut ca,
                    &mut cg,
                );
            }
            assert_eq!(state.nbr.gamma, variant.pinned_gamma().unwrap());
            assert_eq!(cg.proposed, 0);
        }
    }
}
