//! Randomized M-step.
//!
//! A Metropolis chain walks over states `s = (i, k, m)`, where `m` indexes a
//! cached E-step draw of cell `(i, k)`. The stationary distribution on the
//! cache is `π(i, k, m) ∝ w_k p(Y_i | θ_ikm) / N_i`. Thinned states feed
//! closed-form updates of the component means, covariances and the residual
//! scale. The weights come from the responsibilities directly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::estep::EStepCache;
use crate::math::sample_sd;
use crate::mixture::{CovarianceForm, MixtureParams, ParamError, Partition};
use crate::rng::{tag, StreamRng, Streams};

/// Jitter added to the diagonal of a covariance that is not positive definite.
pub const COV_JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MStepError {
    #[error("component {component} received no samples (weight collapse)")]
    ComponentStarvation { component: usize },
    #[error("invalid M-step configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepConfig {
    /// Recorded trials per iteration, across all chains. `None` means `50·n`.
    pub trials: Option<usize>,
    pub thin: usize,
    /// Discarded steps at the start of each chain. `None` means `10·thin`.
    pub burn_in: Option<usize>,
    pub noisy_acceptance: bool,
    pub chains: usize,
    pub covariance: CovarianceForm,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            trials: None,
            thin: 80,
            burn_in: None,
            noisy_acceptance: true,
            chains: 1,
            covariance: CovarianceForm::Full,
        }
    }
}

impl MStepConfig {
    pub fn trials_for(&self, n_subjects: usize) -> usize {
        self.trials.unwrap_or(50 * n_subjects)
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(10 * self.thin)
    }

    pub fn validate(&self, n_subjects: usize) -> Result<(), MStepError> {
        if self.thin == 0 {
            return Err(MStepError::Config("thin must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(MStepError::Config("chains must be at least 1".into()));
        }
        let trials = self.trials_for(n_subjects);
        if trials < 10 * self.thin {
            return Err(MStepError::Config(format!(
                "trials ({trials}) must be at least 10·thin ({})",
                10 * self.thin
            )));
        }
        Ok(())
    }
}

/// Current state of one chain plus its counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub subject: usize,
    pub component: usize,
    pub draw: usize,
    pub trials: u64,
    pub accepted: u64,
    pub empty_proposals: u64,
}

impl ChainState {
    /// Starts at the first subject, the heaviest component, and its first
    /// draw with a finite likelihood. Falls back to other cells in order if
    /// that cell has none.
    pub fn initial(cache: &EStepCache) -> Self {
        let kk = cache.num_components();
        let heaviest = (0..kk)
            .max_by(|a, b| cache.log_weight(*a).total_cmp(&cache.log_weight(*b)).then(b.cmp(a)))
            .expect("at least one component");
        let order = std::iter::once((0, heaviest))
            .chain((0..cache.num_subjects()).flat_map(|i| (0..kk).map(move |k| (i, k))));
        for (i, k) in order {
            if cache.log_weight(k) == f64::NEG_INFINITY {
                continue;
            }
            let cell = cache.cell(i, k);
            if let Some(m) = (0..cell.len()).find(|&m| cell.loglik(m).is_finite()) {
                return Self::at(i, k, m);
            }
        }
        Self::at(0, heaviest, 0)
    }

    pub fn at(subject: usize, component: usize, draw: usize) -> Self {
        Self { subject, component, draw, trials: 0, accepted: 0, empty_proposals: 0 }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.accepted as f64 / self.trials as f64
        }
    }
}

/// `log μ_A` for moving from `(i, k, m)` to `(i2, k2, m2)`.
pub fn log_acceptance_ratio(cache: &EStepCache, from: (usize, usize, usize), to: (usize, usize, usize)) -> f64 {
    let (i, k, m) = from;
    let (i2, k2, m2) = to;
    cache.cell(i2, k2).loglik(m2) - cache.cell(i, k).loglik(m) + cache.log_n_i(i) - cache.log_n_i(i2)
        + cache.log_weight(k2)
        - cache.log_weight(k)
}

/// `P(x < A)` for `A ~ N(μ_A, σ_A²)` with `σ_A = rel·μ_A`:
/// `(1 + erf((μ_A − x) / (σ_A √2))) / 2`. With `rel = 0` this is the
/// indicator of `x < μ_A`.
pub fn noisy_acceptance_probability(log_mu: f64, rel: f64, x: f64) -> f64 {
    if log_mu.is_nan() {
        return 0.0;
    }
    let x_over_mu = x * (-log_mu).exp();
    if rel == 0.0 {
        return if x_over_mu < 1.0 { 1.0 } else { 0.0 };
    }
    let z = (1.0 - x_over_mu) / (rel * std::f64::consts::SQRT_2);
    0.5 * (1.0 + libm::erf(z))
}

/// Deterministic rule: accept iff `x < μ_A`.
pub fn deterministic_accept(log_mu: f64, x: f64) -> bool {
    !log_mu.is_nan() && x < log_mu.exp()
}

/// Relative standard deviation of `μ_A` from the Monte Carlo errors of
/// `N_i`, `N_i'`, `w_k`, `w_k'`. Factors that cancel (`i = i'` or `k = k'`)
/// contribute nothing.
pub fn acceptance_rel_sd(cache: &EStepCache, params: &MixtureParams, from: (usize, usize), to: (usize, usize)) -> f64 {
    let rel_w = |k: usize| {
        let w = params.weights()[k];
        if w > 0.0 {
            params.weight_se()[k] / w
        } else {
            0.0
        }
    };
    let mut v = 0.0;
    if from.0 != to.0 {
        v += cache.rel_se_n_i(from.0).powi(2) + cache.rel_se_n_i(to.0).powi(2);
    }
    if from.1 != to.1 {
        v += rel_w(from.1).powi(2) + rel_w(to.1).powi(2);
    }
    v.sqrt()
}

/// One Metropolis trial. Returns whether the proposal was accepted.
pub fn metropolis_step(
    state: &mut ChainState,
    cache: &EStepCache,
    params: &MixtureParams,
    rng: &mut StreamRng,
    noisy: bool,
) -> bool {
    state.trials += 1;
    let i2 = rng.random_range(0..cache.num_subjects());
    let k2 = rng.random_range(0..cache.num_components());
    let len = cache.cell(i2, k2).len();
    if len == 0 {
        state.empty_proposals += 1;
        return false;
    }
    let m2 = rng.random_range(0..len);
    let from = (state.subject, state.component, state.draw);
    let log_mu = log_acceptance_ratio(cache, from, (i2, k2, m2));
    let x: f64 = rng.random();
    let accept = if noisy {
        let rel = acceptance_rel_sd(cache, params, (from.0, from.1), (i2, k2));
        let p = noisy_acceptance_probability(log_mu, rel, x);
        let y: f64 = rng.random();
        y < p
    } else {
        deterministic_accept(log_mu, x)
    };
    if accept {
        state.subject = i2;
        state.component = k2;
        state.draw = m2;
        state.accepted += 1;
    }
    accept
}

/// Thinned chain states with copies of their parameter vectors, so sets from
/// different iterations can be pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    subjects: Vec<usize>,
    components: Vec<usize>,
    thetas: Vec<f64>,
    quads: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, subjects: Vec::new(), components: Vec::new(), thetas: Vec::new(), quads: Vec::new() }
    }

    pub fn push(&mut self, subject: usize, component: usize, theta: &[f64], quad: f64) {
        assert_eq!(theta.len(), self.dim);
        self.subjects.push(subject);
        self.components.push(component);
        self.thetas.extend_from_slice(theta);
        self.quads.push(quad);
    }

    pub fn extend(&mut self, other: &SampleSet) {
        assert_eq!(self.dim, other.dim);
        self.subjects.extend_from_slice(&other.subjects);
        self.components.extend_from_slice(&other.components);
        self.thetas.extend_from_slice(&other.thetas);
        self.quads.extend_from_slice(&other.quads);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject(&self, j: usize) -> usize {
        self.subjects[j]
    }

    pub fn component(&self, j: usize) -> usize {
        self.components[j]
    }

    pub fn theta(&self, j: usize) -> &[f64] {
        &self.thetas[j * self.dim..(j + 1) * self.dim]
    }

    pub fn quad(&self, j: usize) -> f64 {
        self.quads[j]
    }

    pub fn subject_counts(&self, n_subjects: usize) -> Vec<usize> {
        let mut c = vec![0; n_subjects];
        self.subjects.iter().for_each(|&i| c[i] += 1);
        c
    }

    pub fn component_counts(&self, n_components: usize) -> Vec<usize> {
        let mut c = vec![0; n_components];
        self.components.iter().for_each(|&k| c[k] += 1);
        c
    }
}

/// Closed-form weight update `w_k' = (1/n) Σ_i τ_ik` and its first-order
/// Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightUpdate {
    pub weights: Vec<f64>,
    pub se: Vec<f64>,
}

pub fn update_weights(cache: &EStepCache) -> WeightUpdate {
    let n = cache.num_subjects();
    let kk = cache.num_components();
    let mut w = vec![0.0; kk];
    let mut var = vec![0.0; kk];
    for i in 0..n {
        let rel2: Vec<f64> = (0..kk).map(|k| cache.nik(i, k).rel_se.powi(2)).collect();
        let tau: Vec<f64> = (0..kk).map(|k| cache.tau(i, k)).collect();
        for k in 0..kk {
            w[k] += tau[k];
            // d ln τ_k = (1 − τ_k) d ln n_k − Σ_{j≠k} τ_j d ln n_j
            let mut v = (1.0 - tau[k]).powi(2) * rel2[k];
            for j in (0..kk).filter(|&j| j != k) {
                v += tau[j] * tau[j] * rel2[j];
            }
            var[k] += tau[k] * tau[k] * v;
        }
    }
    let total: f64 = w.iter().sum();
    WeightUpdate {
        weights: w.iter().map(|x| x / total).collect(),
        se: var.iter().map(|v| v.sqrt() / n as f64).collect(),
    }
}

/// What the closed-form updates need besides the samples.
#[derive(Debug, Clone)]
pub struct UpdateInputs<'a> {
    pub weights: &'a [f64],
    pub weight_se: &'a [f64],
    pub partition: &'a Partition,
    pub form: CovarianceForm,
    /// `n / Σ_i m_i` when the residual scale is estimated.
    pub sigma_scale: Option<f64>,
}

/// New parameters and error bars aligned with `params.flatten(_, form)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub params: MixtureParams,
    pub errors: Vec<f64>,
}

fn sd_of_mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        0.0
    } else {
        sample_sd(&v) / (v.len() as f64).sqrt()
    }
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    m.nrows() == 0 || m.clone().cholesky().is_some()
}

/// Means and covariances from labeled samples: mixed coordinates per label,
/// shared coordinates pooled over all samples, zero cross blocks.
pub fn estimate_params(samples: &SampleSet, inputs: &UpdateInputs<'_>) -> Result<ParamEstimate, MStepError> {
    let kk = inputs.weights.len();
    let p = samples.dim();
    let mixed = inputs.partition.mixed(p);
    let shared = inputs.partition.shared().to_vec();
    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); kk];
        (0..samples.len()).for_each(|j| m[samples.component(j)].push(j));
        m
    };
    if let Some(k) = members.iter().position(|m| m.is_empty()) {
        return Err(MStepError::ComponentStarvation { component: k + 1 });
    }
    let all: Vec<usize> = (0..samples.len()).collect();
    let coord = |j: usize, c: usize| samples.theta(j)[c];
    let mean_over = |set: &[usize], c: usize| set.iter().map(|&j| coord(j, c)).sum::<f64>() / set.len() as f64;

    // set of sample indices that determines each coordinate for component k
    let set_for = |k: usize, c: usize| -> &[usize] {
        if inputs.partition.is_shared(c) {
            &all
        } else {
            &members[k]
        }
    };
    let full = inputs.form == CovarianceForm::Full;
    let block_cov = |set: &[usize], mu: &DVector<f64>, coords: &[usize]| -> DMatrix<f64> {
        let q = coords.len();
        let mut s = DMatrix::zeros(q, q);
        for (x, &a) in coords.iter().enumerate() {
            for (y, &b) in coords.iter().enumerate().skip(x) {
                if x != y && !full {
                    continue;
                }
                let v = set.iter().map(|&j| (coord(j, a) - mu[a]) * (coord(j, b) - mu[b])).sum::<f64>()
                    / set.len() as f64;
                s[(x, y)] = v;
                s[(y, x)] = v;
            }
        }
        s
    };

    let mut shared_mean = DVector::zeros(p);
    for &c in &shared {
        shared_mean[c] = mean_over(&all, c);
    }
    let mut beta = block_cov(&all, &shared_mean, &shared);
    if !is_pd(&beta) {
        log::warn!("shared-coordinate covariance is degenerate; adding {COV_JITTER}·I");
        beta += DMatrix::identity(shared.len(), shared.len()) * COV_JITTER;
    }

    let mut means = Vec::with_capacity(kk);
    let mut covs = Vec::with_capacity(kk);
    for k in 0..kk {
        let mut mu = shared_mean.clone();
        for &c in &mixed {
            mu[c] = mean_over(&members[k], c);
        }
        let mut alpha = block_cov(&members[k], &mu, &mixed);
        if !is_pd(&alpha) {
            log::warn!("component {} covariance is degenerate ({} samples); adding {COV_JITTER}·I", k + 1, members[k].len());
            alpha += DMatrix::identity(mixed.len(), mixed.len()) * COV_JITTER;
        }
        let mut cov = DMatrix::zeros(p, p);
        for (x, &a) in mixed.iter().enumerate() {
            for (y, &b) in mixed.iter().enumerate() {
                cov[(a, b)] = alpha[(x, y)];
            }
        }
        for (x, &a) in shared.iter().enumerate() {
            for (y, &b) in shared.iter().enumerate() {
                cov[(a, b)] = beta[(x, y)];
            }
        }
        means.push(mu);
        covs.push(cov);
    }

    let sigma = inputs.sigma_scale.map(|scale| {
        let q: Vec<f64> = (0..samples.len()).map(|j| samples.quad(j)).collect();
        let s2 = q.iter().sum::<f64>() / q.len() as f64 * scale;
        let se_s2 = sd_of_mean_of(q.iter().copied()) * scale;
        let s = s2.sqrt();
        (s, if s > 0.0 { se_s2 / (2.0 * s) } else { 0.0 })
    });

    let params = MixtureParams::new(inputs.weights.to_vec(), means, covs, sigma.map(|s| s.0), inputs.partition.clone())?
        .with_weight_se(inputs.weight_se.to_vec());

    // error bars in flatten() order
    let mut errors = Vec::new();
    for k in 0..kk {
        errors.push(inputs.weight_se[k]);
        let mu = params.mean(k);
        for c in 0..p {
            errors.push(sd_of_mean_of(set_for(k, c).iter().map(|&j| coord(j, c))));
        }
        for c in 0..p {
            let sd = params.cov(k)[(c, c)].sqrt();
            let se_var = sd_of_mean_of(set_for(k, c).iter().map(|&j| (coord(j, c) - mu[c]).powi(2)));
            errors.push(if sd > 0.0 { se_var / (2.0 * sd) } else { 0.0 });
        }
        if full {
            for a in 0..p {
                for b in (a + 1)..p {
                    let same_block = inputs.partition.is_shared(a) == inputs.partition.is_shared(b);
                    errors.push(if same_block {
                        sd_of_mean_of(set_for(k, a).iter().map(|&j| (coord(j, a) - mu[a]) * (coord(j, b) - mu[b])))
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    if let Some((_, se)) = sigma {
        errors.push(se);
    }
    Ok(ParamEstimate { params, errors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub estimate: ParamEstimate,
    pub weight_update: WeightUpdate,
    pub samples: SampleSet,
    pub trials: u64,
    pub accepted: u64,
    pub empty_proposals: u64,
}

impl MStepOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.accepted as f64 / self.trials as f64
        }
    }
}

/// Runs one chain: burn-in, then `trials` recorded steps keeping every
/// `thin`-th state.
pub fn run_chain(
    cache: &EStepCache,
    params: &MixtureParams,
    burn_in: usize,
    trials: usize,
    thin: usize,
    noisy: bool,
    rng: &mut StreamRng,
) -> (ChainState, SampleSet) {
    let mut state = ChainState::initial(cache);
    let mut samples = SampleSet::new(params.dim());
    for _ in 0..burn_in {
        metropolis_step(&mut state, cache, params, rng, noisy);
    }
    for t in 1..=trials {
        metropolis_step(&mut state, cache, params, rng, noisy);
        if t % thin == 0 {
            let cell = cache.cell(state.subject, state.component);
            samples.push(state.subject, state.component, cell.theta(state.draw), cell.quad(state.draw));
        }
    }
    (state, samples)
}

/// Metropolis sampling on the frozen cache followed by the closed-form
/// updates. Chain `c` of iteration `r` uses substream `(MSTEP, r, c)`;
/// chains are merged in index order.
pub fn run_mstep(
    cache: &EStepCache,
    params: &MixtureParams,
    config: &MStepConfig,
    streams: &Streams,
    iteration: u64,
) -> Result<MStepOutcome, MStepError> {
    let n = cache.num_subjects();
    config.validate(n)?;
    let total = config.trials_for(n);
    let per_chain = total.div_ceil(config.chains);
    let chains: Vec<(ChainState, SampleSet)> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.substream(&[tag::MSTEP, iteration, c as u64]);
            run_chain(cache, params, config.burn_in(), per_chain, config.thin, config.noisy_acceptance, &mut rng)
        })
        .collect();
    let mut samples = SampleSet::new(params.dim());
    let (mut trials, mut accepted, mut empty) = (0, 0, 0);
    for (state, s) in &chains {
        samples.extend(s);
        trials += state.trials;
        accepted += state.accepted;
        empty += state.empty_proposals;
    }
    if empty > 0 {
        log::debug!("iteration {iteration}: {empty} proposals hit empty cells");
    }
    let weight_update = update_weights(cache);
    let sigma_scale = params.sigma().map(|_| n as f64 / cache.total_observations() as f64);
    let estimate = estimate_params(
        &samples,
        &UpdateInputs {
            weights: &weight_update.weights,
            weight_se: &weight_update.se,
            partition: params.partition(),
            form: config.covariance,
            sigma_scale,
        },
    )?;
    Ok(MStepOutcome { estimate, weight_update, samples, trials, accepted, empty_proposals: empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estep::CellSamples;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn cache_from(weights: &[f64], logliks: &[Vec<Vec<f64>>]) -> EStepCache {
        let n = logliks.len();
        let mut cells = Vec::new();
        for row in logliks {
            for ls in row {
                let mut c = CellSamples::new(1);
                for (m, &l) in ls.iter().enumerate() {
                    c.push(&[m as f64], l, 1.0);
                }
                cells.push(c);
            }
        }
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let ids: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        EStepCache::from_cells(weights, n, cells, vec![1; n], &ids).unwrap()
    }

    fn params_1d(weights: Vec<f64>) -> MixtureParams {
        let k = weights.len();
        MixtureParams::from_sds(weights, vec![vec![0.0]; k], vec![vec![1.0]; k], None, Partition::all_mixed()).unwrap()
    }

    #[test]
    fn identity_proposal_is_accepted() {
        let cache = cache_from(&[1.0], &[vec![vec![-1.0, -2.0]]]);
        let l = log_acceptance_ratio(&cache, (0, 0, 1), (0, 0, 1));
        assert_eq!(l, 0.0);
        assert!(deterministic_accept(l, 0.999_999));
    }

    #[test]
    fn half_likelihood_is_accepted_half_the_time() {
        let cache = cache_from(&[1.0], &[vec![vec![0.0, -std::f64::consts::LN_2]]]);
        let l = log_acceptance_ratio(&cache, (0, 0, 0), (0, 0, 1));
        let mut rng = StreamRng::seed_from_u64(11);
        let n = 100_000;
        let acc = (0..n).filter(|_| deterministic_accept(l, rng.random())).count();
        let f = acc as f64 / n as f64;
        assert!((0.494..=0.506).contains(&f), "{f}");
    }

    #[test]
    fn zero_noise_matches_deterministic_rule() {
        let mut rng = StreamRng::seed_from_u64(5);
        for _ in 0..10_000 {
            let log_mu: f64 = StandardNormal.sample(&mut rng);
            let x: f64 = rng.random();
            let p = noisy_acceptance_probability(log_mu, 0.0, x);
            assert_eq!(p == 1.0, deterministic_accept(log_mu, x));
            assert!(p == 0.0 || p == 1.0);
        }
        assert_eq!(noisy_acceptance_probability(f64::NAN, 0.1, 0.5), 0.0);
        assert_eq!(noisy_acceptance_probability(f64::INFINITY, 0.0, 0.5), 1.0);
    }

    #[test]
    fn noisy_probability_matches_erf_form() {
        let (mu, sd, x): (f64, f64, f64) = (0.7, 0.2, 0.5);
        let p = noisy_acceptance_probability(mu.ln(), sd / mu, x);
        let direct = 0.5 * (1.0 + libm::erf((mu - x) / (sd * std::f64::consts::SQRT_2)));
        assert!((p - direct).abs() < 1e-14);
    }

    #[test]
    fn symmetric_weights_stay_put() {
        let cache = cache_from(&[0.5, 0.5], &[vec![vec![-1.0, -3.0], vec![-1.0, -3.0]], vec![vec![-2.0, -2.5], vec![-2.0, -2.5]]]);
        let u = update_weights(&cache);
        assert!((u.weights[0] - 0.5).abs() < 1e-15 && (u.weights[1] - 0.5).abs() < 1e-15);
        let single = cache_from(&[1.0], &[vec![vec![-1.0, -3.0]], vec![vec![-2.0, -2.5]]]);
        assert_eq!(update_weights(&single).weights, vec![1.0]);
    }

    #[test]
    fn uniform_target_visits_subjects_evenly() {
        let cache = cache_from(&[1.0], &[vec![vec![-1.0; 4]], vec![vec![-1.0; 4]]]);
        let params = params_1d(vec![1.0]);
        let mut rng = StreamRng::seed_from_u64(2);
        let mut state = ChainState::initial(&cache);
        let mut hits = [0usize; 2];
        for _ in 0..100_000 {
            metropolis_step(&mut state, &cache, &params, &mut rng, false);
            hits[state.subject] += 1;
        }
        let f = hits[0] as f64 / 1e5;
        assert!((f - 0.5).abs() <= 0.01, "{f}");
        assert_eq!(state.accepted, state.trials);
    }

    #[test]
    fn empty_cells_are_rejected_and_counted() {
        let cells = vec![
            {
                let mut c = CellSamples::new(1);
                c.push(&[0.0], -1.0, 1.0);
                c
            },
            CellSamples::new(1),
        ];
        let cache = EStepCache::from_cells(&[0.5, 0.5], 1, cells, vec![1], &["a"]).unwrap();
        let params = params_1d(vec![0.5, 0.5]);
        let mut rng = StreamRng::seed_from_u64(8);
        let mut state = ChainState::initial(&cache);
        for _ in 0..1000 {
            metropolis_step(&mut state, &cache, &params, &mut rng, true);
        }
        assert!(state.empty_proposals > 400 && state.empty_proposals < 600);
        assert_eq!(state.component, 0);
    }

    #[test]
    fn starvation_names_the_component() {
        let mut s = SampleSet::new(1);
        s.push(0, 0, &[1.0], 0.0);
        s.push(0, 0, &[2.0], 0.0);
        let part = Partition::all_mixed();
        let r = estimate_params(
            &s,
            &UpdateInputs { weights: &[0.5, 0.5], weight_se: &[0.0, 0.0], partition: &part, form: CovarianceForm::Full, sigma_scale: None },
        );
        assert_eq!(r.unwrap_err(), MStepError::ComponentStarvation { component: 2 });
    }

    #[test]
    fn closed_form_updates_on_known_samples() {
        let mut s = SampleSet::new(2);
        // component 0: alpha values 1, 3; component 1: alpha values 10, 14
        // beta (coordinate 1) pooled: 2, 4, 6, 8
        s.push(0, 0, &[1.0, 2.0], 0.02);
        s.push(1, 0, &[3.0, 4.0], 0.04);
        s.push(0, 1, &[10.0, 6.0], 0.06);
        s.push(1, 1, &[14.0, 8.0], 0.08);
        let part = Partition::with_shared(vec![1]);
        let est = estimate_params(
            &s,
            &UpdateInputs { weights: &[0.5, 0.5], weight_se: &[0.1, 0.1], partition: &part, form: CovarianceForm::Full, sigma_scale: Some(0.5) },
        )
        .unwrap();
        let p = &est.params;
        assert_eq!(p.mean(0)[0], 2.0);
        assert_eq!(p.mean(1)[0], 12.0);
        assert_eq!(p.mean(0)[1], 5.0);
        assert_eq!(p.mean(1)[1], 5.0);
        assert_eq!(p.cov(0)[(0, 0)], 1.0);
        assert_eq!(p.cov(1)[(0, 0)], 4.0);
        assert_eq!(p.cov(0)[(1, 1)], 5.0);
        assert_eq!(p.cov(0)[(0, 1)], 0.0);
        // sigma^2 = mean(quad) * n / sum m_i = 0.05 * 0.5
        assert!((p.sigma().unwrap() - 0.025f64.sqrt()).abs() < 1e-15);
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(est.errors.len(), p.flatten(&names, CovarianceForm::Full).len());
        // mean.a error for component 0: sd(1,3)/sqrt(2) = 1
        assert!((est.errors[1] - 1.0).abs() < 1e-15);
        assert!(est.errors.iter().all(|e| *e >= 0.0));
    }

    #[test]
    fn single_distinct_sample_gets_jitter() {
        let mut s = SampleSet::new(1);
        s.push(0, 0, &[1.0], 0.0);
        s.push(0, 0, &[1.0], 0.0);
        let part = Partition::all_mixed();
        let est = estimate_params(
            &s,
            &UpdateInputs { weights: &[1.0], weight_se: &[0.0], partition: &part, form: CovarianceForm::Full, sigma_scale: None },
        )
        .unwrap();
        assert_eq!(est.params.cov(0)[(0, 0)], COV_JITTER);
    }

    #[test]
    fn label_frequencies_follow_weight_update() {
        let mut rng = StreamRng::seed_from_u64(21);
        let logliks: Vec<Vec<Vec<f64>>> = (0..8)
            .map(|_| (0..2).map(|_| (0..30).map(|_| StandardNormal.sample(&mut rng)).collect()).collect())
            .collect();
        let cache = cache_from(&[0.3, 0.7], &logliks);
        let params = params_1d(vec![0.3, 0.7]);
        let u = update_weights(&cache);
        let mut streams_rng = StreamRng::seed_from_u64(4);
        let (_, samples) = run_chain(&cache, &params, 200, 400_000, 20, false, &mut streams_rng);
        let counts = samples.component_counts(2);
        let f = counts[0] as f64 / samples.len() as f64;
        let se = (f * (1.0 - f) / samples.len() as f64).sqrt();
        assert!((f - u.weights[0]).abs() < 4.0 * se, "{f} vs {}", u.weights[0]);
    }

    #[test]
    fn shifting_all_logliks_keeps_acceptance() {
        let base = vec![vec![vec![-1.0, -2.0, -0.5]], vec![vec![-3.0, -1.5, -2.5]]];
        let shifted: Vec<Vec<Vec<f64>>> =
            base.iter().map(|r| r.iter().map(|c| c.iter().map(|l| l - 40.0).collect()).collect()).collect();
        let a = cache_from(&[1.0], &base);
        let b = cache_from(&[1.0], &shifted);
        let params = params_1d(vec![1.0]);
        let run = |c: &EStepCache| {
            let mut rng = StreamRng::seed_from_u64(3);
            let mut s = ChainState::initial(c);
            (0..5000).for_each(|_| {
                metropolis_step(&mut s, c, &params, &mut rng, false);
            });
            s.accepted
        };
        let (ra, rb) = (run(&a), run(&b));
        assert!((ra as i64 - rb as i64).abs() < 100, "{ra} vs {rb}");
    }

    #[test]
    fn config_validation() {
        assert!(MStepConfig::default().validate(100).is_ok());
        assert!(MStepConfig { trials: Some(100), ..Default::default() }.validate(100).is_err());
        assert!(MStepConfig { thin: 0, ..Default::default() }.validate(100).is_err());
        assert!(MStepConfig { chains: 0, ..Default::default() }.validate(100).is_err());
        assert_eq!(MStepConfig::default().burn_in(), 800);
    }
}
