//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rpem::mixture::{MixtureParams, Partition};
use rpem::model::{DoseEvent, ErrorModel, Model, ModelError, Observation, SubjectRecord};
use rpem::pkmodels::VoriconazoleModel;
use rpem::sim::SimSpec;

pub const T1_TIMES: [f64; 5] = [1.5, 2.0, 3.0, 4.0, 5.5];

/// Two populations in `k`, shared `V`, 10% proportional error.
pub fn two_pop_truth() -> MixtureParams {
    MixtureParams::from_sds(
        vec![0.8, 0.2],
        vec![vec![0.3, 20.0], vec![0.6, 20.0]],
        vec![vec![0.06, 2.0], vec![0.06, 2.0]],
        Some(0.1),
        Partition::with_shared(vec![1]),
    )
    .unwrap()
}

/// The deliberately poor starting point used for the analytic runs.
pub fn two_pop_initial() -> MixtureParams {
    MixtureParams::from_sds(
        vec![0.5, 0.5],
        vec![vec![1.0, 50.0], vec![1.0, 50.0]],
        vec![vec![1.0 / 3.0, 50.0 / 3.0], vec![1.0 / 3.0, 50.0 / 3.0]],
        Some(0.3),
        Partition::with_shared(vec![1]),
    )
    .unwrap()
}

pub fn two_pop_spec(n: usize) -> SimSpec {
    SimSpec {
        truth: two_pop_truth(),
        n,
        doses: vec![DoseEvent::bolus(0.0, 100.0)],
        times: T1_TIMES.to_vec(),
        covariates: BTreeMap::new(),
        error: ErrorModel::proportional(0.1).unwrap(),
    }
}

pub const VORI_MEAN: [f64; 7] = [2.26, 9.23, 10.32, 1.16, 0.73, 1.75, 1.38];
pub const VORI_SD: [f64; 7] = [0.76, 3.96, 4.45, 0.17, 0.07, 0.77, 0.82];

pub fn vori_truth() -> MixtureParams {
    MixtureParams::from_sds(vec![1.0], vec![VORI_MEAN.to_vec()], vec![VORI_SD.to_vec()], None, Partition::all_mixed())
        .unwrap()
}

pub fn vori_error() -> ErrorModel {
    ErrorModel::polynomial([0.02, 0.1, 0.0, 0.0]).unwrap()
}

pub fn vori_doses() -> Vec<DoseEvent> {
    vec![DoseEvent::infusion(0.0, 180.0, 2.0), DoseEvent::bolus(24.0, 180.0)]
}

pub fn vori_times() -> Vec<f64> {
    (1..=24).map(|j| 2.0 * j as f64).collect()
}

pub fn vori_spec(n: usize) -> SimSpec {
    SimSpec {
        truth: vori_truth(),
        n,
        doses: vori_doses(),
        times: vori_times(),
        covariates: BTreeMap::from([(VoriconazoleModel::WEIGHT.to_string(), 16.5)]),
        error: vori_error(),
    }
}

/// A subject on the reference voriconazole dosing with placeholder observations.
pub fn vori_subject() -> SubjectRecord {
    let obs = vori_times().into_iter().map(|time| Observation { time, value: 0.0 }).collect();
    SubjectRecord::new("ref", vori_doses(), obs, BTreeMap::from([("wt".to_string(), 16.5)])).unwrap()
}

/// Starting point built from one subject's parameters: mean `theta`,
/// diagonal variances `theta / 2.5`.
pub fn vori_initial(theta: &[f64]) -> MixtureParams {
    let var = DVector::from_iterator(theta.len(), theta.iter().map(|v| v / 2.5));
    MixtureParams::new(
        vec![1.0],
        vec![DVector::from_column_slice(theta)],
        vec![DMatrix::from_diagonal(&var)],
        None,
        Partition::all_mixed(),
    )
    .unwrap()
}

/// `Y | theta ~ N(theta, s^2)`: the prediction is the parameter itself.
#[derive(Debug, Clone, Copy)]
pub struct IdentityModel;

impl Model for IdentityModel {
    fn dim(&self) -> usize {
        1
    }

    fn parameter_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn predict_into(&self, theta: &[f64], _subject: &SubjectRecord, out: &mut [f64]) -> Result<(), ModelError> {
        out.fill(theta[0]);
        Ok(())
    }
}

/// One subject per value, each with a single observation at t = 1.
pub fn single_obs_subjects(values: &[f64]) -> Vec<SubjectRecord> {
    values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            SubjectRecord::new((i + 1).to_string(), vec![], vec![Observation { time: 1.0, value }], BTreeMap::new())
                .unwrap()
        })
        .collect()
}

pub const PRIOR_MEAN: f64 = 1.0;
pub const PRIOR_SD: f64 = 1.0;
pub const NOISE_SD: f64 = 0.5;

pub fn conjugate_prior() -> MixtureParams {
    MixtureParams::from_sds(vec![1.0], vec![vec![PRIOR_MEAN]], vec![vec![PRIOR_SD]], None, Partition::all_mixed())
        .unwrap()
}

pub fn conjugate_noise() -> ErrorModel {
    ErrorModel::polynomial([NOISE_SD, 0.0, 0.0, 0.0]).unwrap()
}

/// Closed-form marginal density of one observation `y`.
pub fn conjugate_evidence(y: f64) -> f64 {
    normal_pdf(y, PRIOR_MEAN, PRIOR_SD * PRIOR_SD + NOISE_SD * NOISE_SD)
}

/// Posterior mean and variance of `theta` given one observation `y`.
pub fn conjugate_posterior(y: f64) -> (f64, f64) {
    let prec = 1.0 / (PRIOR_SD * PRIOR_SD) + 1.0 / (NOISE_SD * NOISE_SD);
    let mean = (PRIOR_MEAN / (PRIOR_SD * PRIOR_SD) + y / (NOISE_SD * NOISE_SD)) / prec;
    (mean, 1.0 / prec)
}

/// Mean of the thinned draws of subject `i` and its standard error, which
/// combines the chain noise with the importance-sampling noise of the cached
/// draws (evaluated around `center`).
pub fn chain_mean_with_se(cache: &rpem::estep::EStepCache, samples: &rpem::mstep::SampleSet, i: usize, center: f64) -> (f64, f64, f64) {
    let draws: Vec<f64> = (0..samples.len()).filter(|&j| samples.subject(j) == i).map(|j| samples.theta(j)[0]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = rpem::math::sample_sd(&draws);
    let cell = cache.cell(i, 0);
    let lmax = cell.logliks().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = cell.logliks().iter().map(|l| (l - lmax).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let is_var: f64 = (0..cell.len()).map(|m| (w[m] / wsum).powi(2) * (cell.theta(m)[0] - center).powi(2)).sum();
    (mean, (sd * sd / draws.len() as f64 + is_var).sqrt(), sd)
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Checks a quantity against its tolerance, prints one line, and returns the outcome.
pub fn check(label: &str, value: f64, target: f64, tol: f64) -> bool {
    let ok = (value - target).abs() <= tol;
    println!("    {label}: {value:.6} (target {target}, tol {tol}) {}", if ok { "ok" } else { "MISS" });
    ok
}
