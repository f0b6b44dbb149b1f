//! Outer EM loop, stopping rule and harvesting of the stabilized samples.
//!
//! The loop itself only sees a log-likelihood per iteration; the work of an
//! iteration sits behind [`Engine`] so traces can be injected in tests.

use std::collections::VecDeque;

use thiserror::Error;

use crate::estep::{run_estep, EStepError};
use crate::gmm::{gmm_fit, GmmConfig, GmmError};
use crate::mixture::{align_components, CovarianceForm, MixtureParams, ParamError};
use crate::model::{ErrorModel, Model, SubjectRecord};
use crate::mstep::{estimate_params, run_mstep, MStepConfig, MStepError, ParamEstimate, SampleSet, UpdateInputs};
use crate::rng::Streams;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("iteration {iteration}: {source}")]
    EStep { iteration: u64, source: EStepError },
    #[error("iteration {iteration}: {source}")]
    MStep { iteration: u64, source: MStepError },
    #[error("final re-estimation: {0}")]
    Final(MStepError),
    #[error("GMM on stabilized samples: {0}")]
    Gmm(#[from] GmmError),
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl FitError {
    /// True for failures that indicate the model cannot explain the data at
    /// the current parameters (as opposed to configuration mistakes).
    pub fn is_degeneracy(&self) -> bool {
        matches!(
            self,
            FitError::EStep { source: EStepError::FatalDegeneracy { .. }, .. }
                | FitError::MStep { source: MStepError::ComponentStarvation { .. }, .. }
                | FitError::Final(MStepError::ComponentStarvation { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub window: usize,
    pub m_gauss: usize,
    pub mstep: MStepConfig,
    pub seed: u64,
    /// Run the GMM refinement on the stabilized samples.
    pub gmm: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { max_iterations: 200, window: 30, m_gauss: 1000, mstep: MStepConfig::default(), seed: 0, gmm: true }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.window < 3 {
            return Err(FitError::Config(format!("window must be at least 3, got {}", self.window)));
        }
        if self.max_iterations < self.window {
            return Err(FitError::Config(format!(
                "max_iterations ({}) must be at least the window ({})",
                self.max_iterations, self.window
            )));
        }
        if self.m_gauss < 2 {
            return Err(FitError::Config(format!("m_gauss must be at least 2, got {}", self.m_gauss)));
        }
        Ok(())
    }
}

/// Ordinary least-squares slope of `values` against their index.
pub fn ll_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let t_bar = (n - 1.0) / 2.0;
    let y_bar = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in values.iter().enumerate() {
        let dt = t as f64 - t_bar;
        sxy += dt * (y - y_bar);
        sxx += dt * dt;
    }
    sxy / sxx
}

/// One iteration's contribution to the loop.
#[derive(Debug, Clone)]
pub struct Step<O> {
    pub loglik: f64,
    pub acceptance_rate: f64,
    pub output: O,
}

pub trait Engine {
    type Output;
    /// Runs iteration `iteration` (1-based) and advances the engine's state.
    fn step(&mut self, iteration: u64) -> Result<Step<Self::Output>, FitError>;
}

/// One progress line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub acceptance_rate: f64,
    pub slope: Option<f64>,
}

impl IterationRecord {
    /// `iteration<TAB>loglik<TAB>acceptance<TAB>slope` (slope empty until the
    /// window is full).
    pub fn to_line(&self) -> String {
        let slope = self.slope.map(|s| format!("{s}")).unwrap_or_default();
        format!("{}\t{}\t{}\t{}", self.iteration, self.loglik, self.acceptance_rate, slope)
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome<O> {
    pub trace: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub converged: bool,
    /// Outputs of the last `window` iterations, oldest first.
    pub window: Vec<O>,
}

/// Iterates until the OLS slope of the last `window` log-likelihoods turns
/// negative or `max_iterations` is reached.
pub fn run_loop<E: Engine>(
    engine: &mut E,
    max_iterations: usize,
    window: usize,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<LoopOutcome<E::Output>, FitError> {
    let mut trace = Vec::new();
    let mut acceptance = Vec::new();
    let mut recent = VecDeque::with_capacity(window);
    let mut converged = false;
    for r in 1..=max_iterations {
        let step = engine.step(r as u64)?;
        trace.push(step.loglik);
        acceptance.push(step.acceptance_rate);
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(step.output);
        let slope = (r >= window).then(|| ll_slope(&trace[r - window..]));
        progress(&IterationRecord { iteration: r, loglik: step.loglik, acceptance_rate: step.acceptance_rate, slope });
        if slope.is_some_and(|s| s < 0.0) {
            converged = true;
            break;
        }
    }
    Ok(LoopOutcome { trace, acceptance, converged, window: recent.into() })
}

/// What each RPEM iteration leaves behind for the final estimate.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub estimate: ParamEstimate,
    pub samples: SampleSet,
    pub failure_rate: f64,
}

/// E-step then M-step on real data.
pub struct RpemEngine<'a> {
    pub data: &'a [SubjectRecord],
    pub model: &'a dyn Model,
    pub error: &'a ErrorModel,
    pub params: MixtureParams,
    pub config: &'a FitConfig,
    pub streams: Streams,
}

impl Engine for RpemEngine<'_> {
    type Output = IterationOutput;

    fn step(&mut self, iteration: u64) -> Result<Step<IterationOutput>, FitError> {
        let cache = run_estep(self.data, &self.params, self.model, self.error, self.config.m_gauss, &self.streams, iteration)
            .map_err(|source| FitError::EStep { iteration, source })?;
        let out = run_mstep(&cache, &self.params, &self.config.mstep, &self.streams, iteration)
            .map_err(|source| FitError::MStep { iteration, source })?;
        self.params = out.estimate.params.clone();
        Ok(Step {
            loglik: cache.loglik_total(),
            acceptance_rate: out.acceptance_rate(),
            output: IterationOutput { estimate: out.estimate, samples: out.samples, failure_rate: cache.failure_rate() },
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub parameter_names: Vec<String>,
    pub subject_ids: Vec<String>,
    pub covariance: CovarianceForm,
    pub params: MixtureParams,
    /// Error bars aligned with `params.flatten(&parameter_names, covariance)`.
    pub errors: Vec<f64>,
    pub gmm: Option<MixtureParams>,
    pub trace: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub samples: SampleSet,
    pub subject_shares: Vec<f64>,
    pub failure_rates: Vec<f64>,
}

fn sd_of_mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let width = rows[0].len();
    (0..width)
        .map(|c| crate::math::sd_of_mean(&rows.iter().map(|r| r[c]).collect::<Vec<_>>()))
        .collect()
}

/// Full RPEM fit from `initial`.
pub fn fit(
    data: &[SubjectRecord],
    model: &dyn Model,
    error: &ErrorModel,
    initial: MixtureParams,
    config: &FitConfig,
    progress: impl FnMut(&IterationRecord),
) -> Result<FitResult, FitError> {
    config.validate()?;
    if data.is_empty() {
        return Err(FitError::Config("no subjects".into()));
    }
    if initial.dim() != model.dim() {
        return Err(FitError::Config(format!(
            "initial parameters have dimension {}, model expects {}",
            initial.dim(),
            model.dim()
        )));
    }
    if error.estimates_sigma() != initial.sigma().is_some() {
        return Err(FitError::Config(
            "an initial sigma is required exactly when the error model is proportional".into(),
        ));
    }
    for s in data {
        model.check_subject(s).map_err(|e| FitError::Config(format!("subject {}: {e}", s.id())))?;
    }
    let names = model.parameter_names();
    let form = config.mstep.covariance;
    let partition = initial.partition().clone();
    let kk = initial.num_components();
    let mut engine =
        RpemEngine { data, model, error, params: initial, config, streams: Streams::new(config.seed) };
    let outcome = run_loop(&mut engine, config.max_iterations, config.window, progress)?;
    if !outcome.converged {
        log::warn!("no negative log-likelihood slope within {} iterations", config.max_iterations);
    }

    let mut pooled = SampleSet::new(model.dim());
    for o in &outcome.window {
        pooled.extend(&o.samples);
    }
    let w_rows: Vec<Vec<f64>> = outcome.window.iter().map(|o| o.estimate.params.weights().to_vec()).collect();
    let w_mean: Vec<f64> = (0..kk).map(|k| w_rows.iter().map(|r| r[k]).sum::<f64>() / w_rows.len() as f64).collect();
    let w_total: f64 = w_mean.iter().sum();
    let w_mean: Vec<f64> = w_mean.iter().map(|w| w / w_total).collect();
    let w_se = sd_of_mean_columns(&w_rows);
    let n = data.len() as f64;
    let total_obs: usize = data.iter().map(|s| s.num_observations()).sum();
    let final_est = estimate_params(
        &pooled,
        &UpdateInputs {
            weights: &w_mean,
            weight_se: &w_se,
            partition: &partition,
            form,
            sigma_scale: error.estimates_sigma().then(|| n / total_obs as f64),
        },
    )
    .map_err(FitError::Final)?;
    let flat_rows: Vec<Vec<f64>> = outcome
        .window
        .iter()
        .map(|o| o.estimate.params.flatten(&names, form).into_iter().map(|v| v.value).collect())
        .collect();
    let errors = sd_of_mean_columns(&flat_rows);

    let gmm = if config.gmm {
        let points: Vec<Vec<f64>> = (0..pooled.len()).map(|j| pooled.theta(j).to_vec()).collect();
        let g = gmm_fit(&points, &GmmConfig::new(kk), &Streams::new(config.seed))?;
        let perm = align_components(&final_est.params, &g.params);
        Some(g.params.permuted(&perm))
    } else {
        None
    };

    let counts = pooled.subject_counts(data.len());
    let subject_shares = counts.iter().map(|&c| c as f64 / pooled.len().max(1) as f64).collect();
    Ok(FitResult {
        parameter_names: names,
        subject_ids: data.iter().map(|s| s.id().to_string()).collect(),
        covariance: form,
        params: final_est.params,
        errors,
        gmm,
        iterations: outcome.trace.len(),
        trace: outcome.trace,
        acceptance: outcome.acceptance,
        converged: outcome.converged,
        samples: pooled,
        subject_shares,
        failure_rates: outcome.window.iter().map(|o| o.failure_rate).collect(),
    })
}
