//! Subject data, the structural-model abstraction and the residual error
//! models that turn predictions into observation log-likelihoods.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::ops::Deref;

use thiserror::Error;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("subject {id}: {reason}")]
    InvalidSubject { id: String, reason: String },
    #[error("theta entry {index} is not finite ({value})")]
    NonFiniteTheta { index: usize, value: f64 },
}

/// Failure to evaluate a structural model for one parameter vector.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter {name} = {value} outside the admissible domain")]
    Domain { name: &'static str, value: f64 },
    #[error("non-finite prediction at t = {time}")]
    NonFinite { time: f64 },
    #[error("missing covariate `{0}`")]
    MissingCovariate(String),
    #[error("unsupported dosing: {0}")]
    Unsupported(String),
    #[error("degenerate error model: stdev {stdev} at prediction {prediction}")]
    DegenerateError { prediction: f64, stdev: f64 },
    #[error("ODE integration failed for theta {theta:?}: {source}")]
    Integration {
        theta: Vec<f64>,
        #[source]
        source: crate::odesolve::OdeError,
    },
    #[error("expected {expected} parameters, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseEvent {
    /// Hours.
    pub time: f64,
    pub amount: f64,
    /// Zero for a bolus, otherwise the infusion length in hours.
    pub duration: f64,
}

impl DoseEvent {
    pub fn bolus(time: f64, amount: f64) -> Self {
        Self { time, amount, duration: 0.0 }
    }

    pub fn infusion(time: f64, amount: f64, duration: f64) -> Self {
        Self { time, amount, duration }
    }

    pub fn is_bolus(&self) -> bool {
        self.duration == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
}

/// One subject's dosing history, observations and (time-constant) covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    id: String,
    doses: Vec<DoseEvent>,
    observations: Vec<Observation>,
    covariates: BTreeMap<String, f64>,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        doses: Vec<DoseEvent>,
        observations: Vec<Observation>,
        covariates: BTreeMap<String, f64>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let bad = |reason: String| DataError::InvalidSubject { id: id.clone(), reason };
        if observations.is_empty() {
            return Err(bad("no observations".into()));
        }
        for (j, o) in observations.iter().enumerate() {
            if !(o.time.is_finite() && o.time >= 0.0) {
                return Err(bad(format!("observation time {} is not a non-negative number", o.time)));
            }
            if !o.value.is_finite() {
                return Err(bad(format!("observation value at t = {} is not finite", o.time)));
            }
            if j > 0 && o.time <= observations[j - 1].time {
                return Err(bad(format!("observation times not strictly increasing at t = {}", o.time)));
            }
        }
        for d in &doses {
            if !(d.time.is_finite() && d.time >= 0.0) {
                return Err(bad(format!("dose time {} is not a non-negative number", d.time)));
            }
            if !(d.amount.is_finite() && d.amount >= 0.0) {
                return Err(bad(format!("dose amount {} is negative or not finite", d.amount)));
            }
            if !(d.duration.is_finite() && d.duration >= 0.0) {
                return Err(bad(format!("dose duration {} is negative or not finite", d.duration)));
            }
        }
        for (name, v) in &covariates {
            if !v.is_finite() {
                return Err(bad(format!("covariate {name} is not finite")));
            }
        }
        Ok(Self { id, doses, observations, covariates })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn doses(&self) -> &[DoseEvent] {
        &self.doses
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn covariates(&self) -> &BTreeMap<String, f64> {
        &self.covariates
    }

    /// Covariate lookup, case-insensitive on the name.
    pub fn covariate(&self, name: &str) -> Option<f64> {
        self.covariates
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| *v)
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn observation_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.time)
    }

    /// Same subject with replaced observation values (simulation helper).
    pub(crate) fn with_values(&self, values: &[f64]) -> Self {
        let mut s = self.clone();
        for (o, &v) in s.observations.iter_mut().zip(values) {
            o.value = v;
        }
        s
    }
}

/// One draw of a subject's random-effect parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector(Vec<f64>);

impl ThetaVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DataError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFiniteTheta { index, value });
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ThetaVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Residual error model for a single observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorModel {
    /// `stdev = sigma * |pred|`; `sigma` is estimated.
    Proportional { sigma: f64 },
    /// `stdev = c0 + c1 pred + c2 pred^2 + c3 pred^3`; coefficients are fixed.
    Polynomial { coefficients: [f64; 4] },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid error model: {0}")]
pub struct ErrorModelError(pub String);

impl ErrorModel {
    pub fn proportional(sigma: f64) -> Result<Self, ErrorModelError> {
        let e = ErrorModel::Proportional { sigma };
        e.validate()?;
        Ok(e)
    }

    pub fn polynomial(coefficients: [f64; 4]) -> Result<Self, ErrorModelError> {
        let e = ErrorModel::Polynomial { coefficients };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), ErrorModelError> {
        match *self {
            ErrorModel::Proportional { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(ErrorModelError(format!("sigma must be positive, got {sigma}")));
                }
            }
            ErrorModel::Polynomial { coefficients } => {
                if coefficients.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                    return Err(ErrorModelError(format!(
                        "polynomial coefficients must be non-negative, got {coefficients:?}"
                    )));
                }
                if coefficients.iter().all(|&c| c == 0.0) {
                    return Err(ErrorModelError("all polynomial coefficients are zero".into()));
                }
            }
        }
        Ok(())
    }

    /// Whether the residual scale is a fixed effect estimated by the fit.
    pub fn estimates_sigma(&self) -> bool {
        matches!(self, ErrorModel::Proportional { .. })
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            ErrorModel::Proportional { sigma } => Some(sigma),
            ErrorModel::Polynomial { .. } => None,
        }
    }

    /// Copy with the proportional scale replaced; polynomial models are unchanged.
    pub fn with_sigma(&self, sigma: Option<f64>) -> Self {
        match (*self, sigma) {
            (ErrorModel::Proportional { .. }, Some(sigma)) => ErrorModel::Proportional { sigma },
            (e, _) => e,
        }
    }

    pub fn stdev(&self, prediction: f64) -> f64 {
        match *self {
            ErrorModel::Proportional { sigma } => sigma * prediction.abs(),
            ErrorModel::Polynomial { coefficients: [c0, c1, c2, c3] } => {
                c0 + prediction * (c1 + prediction * (c2 + prediction * c3))
            }
        }
    }

    /// Scale of the quadratic form `r = (Y - h)^T H^{-1} (Y - h)` for one observation:
    /// `H_jj` excludes `sigma^2` for proportional error.
    fn unit_scale(&self, prediction: f64, stdev: f64) -> f64 {
        match self {
            ErrorModel::Proportional { .. } => prediction.abs(),
            ErrorModel::Polynomial { .. } => stdev,
        }
    }
}

impl fmt::Display for ErrorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorModel::Proportional { sigma } => write!(f, "proportional(sigma={sigma})"),
            ErrorModel::Polynomial { coefficients } => write!(f, "polynomial({coefficients:?})"),
        }
    }
}

/// A structural model `h_i(theta)`: predicted concentrations at a subject's
/// observation times.
pub trait Model: Send + Sync + fmt::Debug {
    /// Parameter dimension `p`.
    fn dim(&self) -> usize;

    fn parameter_names(&self) -> Vec<String>;

    /// Writes one prediction per observation into `out` (length `m_i`).
    fn predict_into(
        &self,
        theta: &[f64],
        subject: &SubjectRecord,
        out: &mut [f64],
    ) -> Result<(), ModelError>;

    fn predict(&self, theta: &[f64], subject: &SubjectRecord) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; subject.num_observations()];
        self.predict_into(theta, subject, &mut out)?;
        Ok(out)
    }

    /// Rejects subjects whose dosing this model cannot represent.
    fn check_subject(&self, _subject: &SubjectRecord) -> Result<(), ModelError> {
        Ok(())
    }
}

/// Observation log-likelihood together with the error-scaled residual
/// quadratic form used by the residual-scale update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsLikelihood {
    pub loglik: f64,
    pub quad: f64,
}

/// Log-likelihood of precomputed predictions.
pub fn loglik_from_predictions(
    subject: &SubjectRecord,
    predictions: &[f64],
    err: &ErrorModel,
) -> Result<ObsLikelihood, ModelError> {
    let mut loglik = 0.0;
    let mut quad = 0.0;
    for (obs, &pred) in subject.observations().iter().zip(predictions) {
        if !pred.is_finite() {
            return Err(ModelError::NonFinite { time: obs.time });
        }
        let sd = err.stdev(pred);
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(ModelError::DegenerateError { prediction: pred, stdev: sd });
        }
        let z = (obs.value - pred) / sd;
        loglik -= 0.5 * z * z + sd.ln() + HALF_LN_2PI;
        let u = (obs.value - pred) / err.unit_scale(pred, sd);
        quad += u * u;
    }
    Ok(ObsLikelihood { loglik, quad })
}

/// `Σ_j log N(Y_j; pred_j, stdev_j^2)` under the bound error model.
pub fn obs_loglik(
    subject: &SubjectRecord,
    theta: &[f64],
    model: &dyn Model,
    err: &ErrorModel,
) -> Result<f64, ModelError> {
    let pred = model.predict(theta, subject)?;
    Ok(loglik_from_predictions(subject, &pred, err)?.loglik)
}

/// `ln(sqrt(2 pi))`, exposed for tests and oracles.
pub fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}
