//! Monte Carlo E-step.
//!
//! For every subject `i` and component `k`, `m_gauss` parameter vectors are
//! drawn from the component Gaussian and the subject's observation likelihood
//! is evaluated at each draw. The average is the marginal likelihood `n_ik`;
//! the draws and their log-likelihoods are kept so the M-step can reuse them
//! without touching the model again. Everything is held in log space.

use rayon::prelude::*;
use thiserror::Error;

use crate::math::logsumexp;
use crate::mixture::MixtureParams;
use crate::model::{loglik_from_predictions, ErrorModel, Model, SubjectRecord};
use crate::rng::{tag, StreamRng, Streams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EStepError {
    #[error("no component explains subject {id} (index {index}) at the current parameters")]
    FatalDegeneracy { index: usize, id: String },
    #[error("invalid E-step configuration: {0}")]
    Config(String),
}

/// Cached draws for one (subject, component) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSamples {
    dim: usize,
    thetas: Vec<f64>,
    loglik: Vec<f64>,
    quad: Vec<f64>,
}

impl CellSamples {
    pub fn new(dim: usize) -> Self {
        Self { dim, thetas: Vec::new(), loglik: Vec::new(), quad: Vec::new() }
    }

    /// Appends a draw; failed evaluations carry `loglik = -inf`.
    pub fn push(&mut self, theta: &[f64], loglik: f64, quad: f64) {
        assert_eq!(theta.len(), self.dim);
        self.thetas.extend_from_slice(theta);
        self.loglik.push(loglik);
        self.quad.push(quad);
    }

    pub fn len(&self) -> usize {
        self.loglik.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loglik.is_empty()
    }

    pub fn theta(&self, m: usize) -> &[f64] {
        &self.thetas[m * self.dim..(m + 1) * self.dim]
    }

    pub fn loglik(&self, m: usize) -> f64 {
        self.loglik[m]
    }

    pub fn logliks(&self) -> &[f64] {
        &self.loglik
    }

    /// Error-scaled residual quadratic form at draw `m`.
    pub fn quad(&self, m: usize) -> f64 {
        self.quad[m]
    }
}

/// `n_ik` in log space with its relative standard error `se_ik / n_ik`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NikEstimate {
    pub log_n: f64,
    pub rel_se: f64,
    pub failures: usize,
}

impl NikEstimate {
    pub fn n(&self) -> f64 {
        self.log_n.exp()
    }

    pub fn se(&self) -> f64 {
        self.rel_se * self.n()
    }

    /// Mean of `exp(logliks)` and the standard error of that mean.
    pub fn from_logliks(logliks: &[f64]) -> Self {
        let m = logliks.len();
        let failures = logliks.iter().filter(|l| **l == f64::NEG_INFINITY).count();
        let lse = logsumexp(logliks);
        if lse == f64::NEG_INFINITY || m == 0 {
            return Self { log_n: f64::NEG_INFINITY, rel_se: 0.0, failures };
        }
        let log_n = lse - (m as f64).ln();
        let max = logliks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = logliks.iter().map(|&l| (l - max).exp()).collect();
        let mean = scaled.iter().sum::<f64>() / m as f64;
        let rel_se = if m > 1 {
            let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
            var.sqrt() / (mean * (m as f64).sqrt())
        } else {
            0.0
        };
        Self { log_n, rel_se, failures }
    }
}

/// Draws `m_gauss` parameter vectors from component `k` and averages the
/// observation likelihood over them.
#[allow(clippy::too_many_arguments)]
pub fn estimate_nik(
    subject: &SubjectRecord,
    k: usize,
    params: &MixtureParams,
    model: &dyn Model,
    err: &ErrorModel,
    m_gauss: usize,
    rng: &mut StreamRng,
) -> Result<(NikEstimate, CellSamples), EStepError> {
    if m_gauss < 2 {
        return Err(EStepError::Config(format!("m_gauss must be at least 2, got {m_gauss}")));
    }
    if k >= params.num_components() {
        return Err(EStepError::Config(format!("component {k} out of range")));
    }
    let p = params.dim();
    let gauss = params.component(k);
    let mut cell = CellSamples {
        dim: p,
        thetas: Vec::with_capacity(m_gauss * p),
        loglik: Vec::with_capacity(m_gauss),
        quad: Vec::with_capacity(m_gauss),
    };
    let mut theta = vec![0.0; p];
    let mut pred = vec![0.0; subject.num_observations()];
    for _ in 0..m_gauss {
        gauss.sample_into(rng, &mut theta);
        let lik = model
            .predict_into(&theta, subject, &mut pred)
            .and_then(|_| loglik_from_predictions(subject, &pred, err));
        match lik {
            Ok(l) => cell.push(&theta, l.loglik, l.quad),
            Err(_) => cell.push(&theta, f64::NEG_INFINITY, f64::NAN),
        }
    }
    Ok((NikEstimate::from_logliks(&cell.loglik), cell))
}

/// Everything the M-step needs from one E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepCache {
    n_subjects: usize,
    n_components: usize,
    cells: Vec<CellSamples>,
    nik: Vec<NikEstimate>,
    log_big_n: Vec<f64>,
    rel_se_big_n: Vec<f64>,
    tau: Vec<f64>,
    log_weights: Vec<f64>,
    loglik_total: f64,
    num_obs: Vec<usize>,
}

impl EStepCache {
    /// Assembles a cache from precomputed cells (row-major over `(i, k)`).
    /// `n_ik` and `N_i` are recomputed from the cell log-likelihoods.
    pub fn from_cells(
        weights: &[f64],
        n_subjects: usize,
        cells: Vec<CellSamples>,
        num_obs: Vec<usize>,
        ids: &[&str],
    ) -> Result<Self, EStepError> {
        let n_components = weights.len();
        assert_eq!(cells.len(), n_subjects * n_components);
        assert_eq!(num_obs.len(), n_subjects);
        let nik: Vec<NikEstimate> = cells.iter().map(|c| NikEstimate::from_logliks(&c.loglik)).collect();
        let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let mut log_big_n = Vec::with_capacity(n_subjects);
        let mut rel_se_big_n = Vec::with_capacity(n_subjects);
        let mut tau = Vec::with_capacity(n_subjects * n_components);
        for i in 0..n_subjects {
            let row = &nik[i * n_components..(i + 1) * n_components];
            let terms: Vec<f64> = row.iter().zip(&log_weights).map(|(e, lw)| lw + e.log_n).collect();
            let log_n_i = logsumexp(&terms);
            if log_n_i == f64::NEG_INFINITY || log_n_i.is_nan() {
                return Err(EStepError::FatalDegeneracy {
                    index: i,
                    id: ids.get(i).map(|s| s.to_string()).unwrap_or_else(|| i.to_string()),
                });
            }
            let mut rel2 = 0.0;
            for (t, e) in terms.iter().zip(row) {
                let tau_ik = (t - log_n_i).exp();
                rel2 += tau_ik * tau_ik * e.rel_se * e.rel_se;
                tau.push(tau_ik);
            }
            log_big_n.push(log_n_i);
            rel_se_big_n.push(rel2.sqrt());
        }
        let loglik_total = log_big_n.iter().sum();
        Ok(Self {
            n_subjects,
            n_components,
            cells,
            nik,
            log_big_n,
            rel_se_big_n,
            tau,
            log_weights,
            loglik_total,
            num_obs,
        })
    }

    pub fn num_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn num_components(&self) -> usize {
        self.n_components
    }

    pub fn cell(&self, i: usize, k: usize) -> &CellSamples {
        &self.cells[i * self.n_components + k]
    }

    pub fn nik(&self, i: usize, k: usize) -> &NikEstimate {
        &self.nik[i * self.n_components + k]
    }

    pub fn log_n_i(&self, i: usize) -> f64 {
        self.log_big_n[i]
    }

    /// `se(N_i) / N_i` with `se(N_i)^2 = Σ_k w_k^2 se_ik^2`.
    pub fn rel_se_n_i(&self, i: usize) -> f64 {
        self.rel_se_big_n[i]
    }

    pub fn tau(&self, i: usize, k: usize) -> f64 {
        self.tau[i * self.n_components + k]
    }

    pub fn log_weight(&self, k: usize) -> f64 {
        self.log_weights[k]
    }

    /// `ln L = Σ_i ln N_i`.
    pub fn loglik_total(&self) -> f64 {
        self.loglik_total
    }

    pub fn num_observations(&self, i: usize) -> usize {
        self.num_obs[i]
    }

    pub fn total_observations(&self) -> usize {
        self.num_obs.iter().sum()
    }

    pub fn evaluations(&self) -> usize {
        self.cells.iter().map(|c| c.len()).sum()
    }

    pub fn failures(&self) -> usize {
        self.nik.iter().map(|e| e.failures).sum()
    }

    pub fn failure_rate(&self) -> f64 {
        let n = self.evaluations();
        if n == 0 {
            0.0
        } else {
            self.failures() as f64 / n as f64
        }
    }
}

/// Fills the whole `(i, k)` grid. Cell `(i, k)` of iteration `iteration`
/// always uses the substream `(ESTEP, iteration, i, k)`, so the cache is the
/// same for any number of worker threads.
pub fn run_estep(
    data: &[SubjectRecord],
    params: &MixtureParams,
    model: &dyn Model,
    err: &ErrorModel,
    m_gauss: usize,
    streams: &Streams,
    iteration: u64,
) -> Result<EStepCache, EStepError> {
    if data.is_empty() {
        return Err(EStepError::Config("no subjects".into()));
    }
    if params.dim() != model.dim() {
        return Err(EStepError::Config(format!(
            "parameter dimension {} does not match model dimension {}",
            params.dim(),
            model.dim()
        )));
    }
    let err = err.with_sigma(params.sigma());
    let kk = params.num_components();
    let cells = (0..data.len() * kk)
        .into_par_iter()
        .map(|c| {
            let (i, k) = (c / kk, c % kk);
            let mut rng = streams.substream(&[tag::ESTEP, iteration, i as u64, k as u64]);
            estimate_nik(&data[i], k, params, model, &err, m_gauss, &mut rng).map(|(_, cell)| cell)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<&str> = data.iter().map(|s| s.id()).collect();
    let cache = EStepCache::from_cells(
        params.weights(),
        data.len(),
        cells,
        data.iter().map(|s| s.num_observations()).collect(),
        &ids,
    )?;
    if cache.failures() > 0 {
        log::debug!(
            "iteration {iteration}: {} of {} model evaluations failed",
            cache.failures(),
            cache.evaluations()
        );
    }
    Ok(cache)
}
