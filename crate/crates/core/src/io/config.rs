//! TOML run configuration.
//!
//! ```toml
//! seed = 1
//!
//! [model]
//! name = "one_compartment"        # or "voriconazole" (takes rtol/atol/max_steps)
//!
//! [error]
//! kind = "proportional"            # sigma is the starting value
//! sigma = 0.3
//!
//! [init]
//! weights = [0.5, 0.5]
//! means = [[1.0, 50.0], [1.0, 50.0]]
//! sds = [[0.33, 16.7], [0.33, 16.7]]   # or covariances = [[[..]]]
//! shared = ["V"]
//!
//! [estep]
//! m_gauss = 2000
//!
//! [mstep]
//! trials_per_subject = 200         # or trials = <total>
//! thin = 80
//! noisy_acceptance = true
//! covariance = "full"              # or "diagonal"
//!
//! [stopping]
//! window = 30
//! max_iterations = 200
//!
//! [sim]                            # only needed by `simulate`
//! n = 100
//! times = [1.5, 2.0, 3.0, 4.0, 5.5]
//! doses = [{ time = 0.0, amount = 100.0 }]
//! [sim.truth]                      # same keys as [init]
//! [sim.error]                      # same keys as [error]
//! ```
//!
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::driver::FitConfig;
use crate::mixture::{CovarianceForm, MixtureParams, ParamError, Partition};
use crate::model::{DoseEvent, ErrorModel, Model};
use crate::mstep::MStepConfig;
use crate::odesolve::SolverConfig;
use crate::pkmodels::{OneCompartmentModel, VoriconazoleModel};
use crate::sim::SimSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read { path: std::path::PathBuf, source: std::io::Error },
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{context}: {source}")]
    Param { context: &'static str, source: ParamError },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub error: Option<ErrorSection>,
    pub init: Option<MixtureSection>,
    #[serde(default)]
    pub estep: EStepSection,
    #[serde(default)]
    pub mstep: MStepSection,
    #[serde(default)]
    pub stopping: StoppingSection,
    pub sim: Option<SimSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSection {
    pub kind: String,
    pub sigma: Option<f64>,
    pub coefficients: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sds: Option<Vec<Vec<f64>>>,
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub shared: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EStepSection {
    pub m_gauss: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MStepSection {
    pub trials: Option<usize>,
    pub trials_per_subject: Option<usize>,
    pub thin: Option<usize>,
    pub burn_in: Option<usize>,
    pub noisy_acceptance: Option<bool>,
    pub chains: Option<usize>,
    pub covariance: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingSection {
    pub window: Option<usize>,
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseSection {
    pub time: f64,
    pub amount: f64,
    #[serde(default)]
    pub duration: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n: usize,
    pub times: Vec<f64>,
    #[serde(default)]
    pub doses: Vec<DoseSection>,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    pub truth: MixtureSection,
    pub error: ErrorSection,
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl ErrorSection {
    pub fn build(&self) -> Result<ErrorModel, ConfigError> {
        match self.kind.as_str() {
            "proportional" => {
                if self.coefficients.is_some() {
                    return Err(invalid("proportional error takes sigma, not coefficients"));
                }
                let s = self.sigma.ok_or_else(|| invalid("proportional error needs sigma"))?;
                ErrorModel::proportional(s).map_err(|e| invalid(e.to_string()))
            }
            "polynomial" => {
                if self.sigma.is_some() {
                    return Err(invalid("polynomial error takes coefficients, not sigma"));
                }
                let c = self.coefficients.as_ref().ok_or_else(|| invalid("polynomial error needs coefficients"))?;
                if c.is_empty() || c.len() > 4 {
                    return Err(invalid(format!("1 to 4 polynomial coefficients expected, got {}", c.len())));
                }
                let mut arr = [0.0; 4];
                arr[..c.len()].copy_from_slice(c);
                ErrorModel::polynomial(arr).map_err(|e| invalid(e.to_string()))
            }
            other => Err(invalid(format!("unknown error kind '{other}' (proportional, polynomial)"))),
        }
    }
}

impl MixtureSection {
    pub fn build(&self, names: &[String], sigma: Option<f64>, context: &'static str) -> Result<MixtureParams, ConfigError> {
        let p = names.len();
        let k = self.weights.len();
        if self.means.len() != k || self.means.iter().any(|m| m.len() != p) {
            return Err(invalid(format!("{context}: means must be {k} vectors of length {p} ({})", names.join(", "))));
        }
        let covs: Vec<DMatrix<f64>> = match (&self.sds, &self.covariances) {
            (Some(sds), None) => {
                if sds.len() != k || sds.iter().any(|s| s.len() != p) {
                    return Err(invalid(format!("{context}: sds must be {k} vectors of length {p}")));
                }
                sds.iter().map(|s| DMatrix::from_diagonal(&DVector::from_iterator(p, s.iter().map(|v| v * v)))).collect()
            }
            (None, Some(covs)) => {
                if covs.len() != k || covs.iter().any(|c| c.len() != p || c.iter().any(|r| r.len() != p)) {
                    return Err(invalid(format!("{context}: covariances must be {k} matrices of size {p}x{p}")));
                }
                covs.iter().map(|c| DMatrix::from_fn(p, p, |r, s| c[r][s])).collect()
            }
            _ => return Err(invalid(format!("{context}: give exactly one of sds or covariances"))),
        };
        let mut shared = Vec::new();
        for s in &self.shared {
            let idx = names
                .iter()
                .position(|n| n.eq_ignore_ascii_case(s))
                .ok_or_else(|| invalid(format!("{context}: unknown shared parameter '{s}'")))?;
            shared.push(idx);
        }
        MixtureParams::new(
            self.weights.clone(),
            self.means.iter().map(|m| DVector::from_vec(m.clone())).collect(),
            covs,
            sigma,
            Partition::with_shared(shared),
        )
        .map_err(|source| ConfigError::Param { context, source })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn build_model(&self) -> Result<Box<dyn Model>, ConfigError> {
        let m = &self.model;
        match m.name.as_str() {
            "one_compartment" => {
                if m.rtol.is_some() || m.atol.is_some() || m.max_steps.is_some() {
                    return Err(invalid("the one_compartment model has no solver options"));
                }
                Ok(Box::new(OneCompartmentModel))
            }
            "voriconazole" => {
                let d = SolverConfig::default();
                let solver = SolverConfig {
                    rtol: m.rtol.unwrap_or(d.rtol),
                    atol: m.atol.unwrap_or(d.atol),
                    max_steps: m.max_steps.unwrap_or(d.max_steps),
                    initial_step: None,
                };
                solver.validate().map_err(|e| invalid(e.to_string()))?;
                Ok(Box::new(VoriconazoleModel::new(solver)))
            }
            other => Err(invalid(format!("unknown model '{other}' (one_compartment, voriconazole)"))),
        }
    }

    pub fn fit_config(&self) -> Result<FitConfig, ConfigError> {
        let d = FitConfig::default();
        let md = MStepConfig::default();
        let ms = &self.mstep;
        let covariance = match ms.covariance.as_deref() {
            None | Some("full") => CovarianceForm::Full,
            Some("diagonal") => CovarianceForm::Diagonal,
            Some(other) => return Err(invalid(format!("unknown covariance form '{other}' (full, diagonal)"))),
        };
        if ms.trials.is_some() && ms.trials_per_subject.is_some() {
            return Err(invalid("give at most one of mstep.trials and mstep.trials_per_subject"));
        }
        let cfg = FitConfig {
            max_iterations: self.stopping.max_iterations.unwrap_or(d.max_iterations),
            window: self.stopping.window.unwrap_or(d.window),
            m_gauss: self.estep.m_gauss.unwrap_or(d.m_gauss),
            mstep: MStepConfig {
                trials: ms.trials,
                thin: ms.thin.unwrap_or(md.thin),
                burn_in: ms.burn_in,
                noisy_acceptance: ms.noisy_acceptance.unwrap_or(md.noisy_acceptance),
                chains: ms.chains.unwrap_or(md.chains),
                covariance,
            },
            seed: self.seed,
            gmm: true,
        };
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Fit configuration with per-subject trial counts resolved for `n` subjects.
    pub fn fit_config_for(&self, n: usize) -> Result<FitConfig, ConfigError> {
        let mut cfg = self.fit_config()?;
        if let Some(t) = self.mstep.trials_per_subject {
            cfg.mstep.trials = Some(t * n);
        }
        cfg.mstep.validate(n).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn error_model(&self) -> Result<ErrorModel, ConfigError> {
        self.error.as_ref().ok_or_else(|| invalid("missing [error] section"))?.build()
    }

    pub fn initial_params(&self, model: &dyn Model) -> Result<MixtureParams, ConfigError> {
        let err = self.error_model()?;
        self.init
            .as_ref()
            .ok_or_else(|| invalid("missing [init] section"))?
            .build(&model.parameter_names(), err.sigma(), "init")
    }

    pub fn sim_spec(&self, model: &dyn Model) -> Result<SimSpec, ConfigError> {
        let sim = self.sim.as_ref().ok_or_else(|| invalid("missing [sim] section"))?;
        let error = sim.error.build()?;
        let truth = sim.truth.build(&model.parameter_names(), error.sigma(), "sim.truth")?;
        Ok(SimSpec {
            truth,
            n: sim.n,
            doses: sim.doses.iter().map(|d| DoseEvent { time: d.time, amount: d.amount, duration: d.duration }).collect(),
            times: sim.times.clone(),
            covariates: sim.covariates.clone(),
            error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_POP: &str = r#"
seed = 4

[model]
name = "one_compartment"

[error]
kind = "proportional"
sigma = 0.3

[init]
weights = [0.5, 0.5]
means = [[1.0, 50.0], [1.0, 50.0]]
sds = [[0.3333333333333333, 16.666666666666668], [0.3333333333333333, 16.666666666666668]]
shared = ["V"]

[estep]
m_gauss = 2000

[mstep]
trials_per_subject = 200

[sim]
n = 100
times = [1.5, 2.0, 3.0, 4.0, 5.5]
doses = [{ time = 0.0, amount = 100.0 }]

[sim.truth]
weights = [0.8, 0.2]
means = [[0.3, 20.0], [0.6, 20.0]]
sds = [[0.06, 2.0], [0.06, 2.0]]
shared = ["V"]

[sim.error]
kind = "proportional"
sigma = 0.1
"#;

    #[test]
    fn full_config_maps_onto_types() {
        let c = RunConfig::from_toml(TWO_POP).unwrap();
        let model = c.build_model().unwrap();
        let init = c.initial_params(model.as_ref()).unwrap();
        assert_eq!(init.sigma(), Some(0.3));
        assert_eq!(init.partition().shared(), &[1]);
        let fit = c.fit_config_for(100).unwrap();
        assert_eq!(fit.seed, 4);
        assert_eq!(fit.m_gauss, 2000);
        assert_eq!(fit.mstep.trials, Some(20_000));
        assert_eq!(fit.window, 30);
        let spec = c.sim_spec(model.as_ref()).unwrap();
        assert_eq!(spec.n, 100);
        assert_eq!(spec.truth.weights(), &[0.8, 0.2]);
        assert_eq!(spec.doses, vec![DoseEvent::bolus(0.0, 100.0)]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = TWO_POP.replace("m_gauss = 2000", "m_guass = 2000");
        assert!(matches!(RunConfig::from_toml(&bad), Err(ConfigError::Toml(_))));
        let bad = TWO_POP.replace("seed = 4", "seed = 4\nverbose = true");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn semantic_errors() {
        let c = RunConfig::from_toml(&TWO_POP.replace("\"one_compartment\"", "\"two_compartment\"")).unwrap();
        assert!(c.build_model().is_err());
        let c = RunConfig::from_toml(&TWO_POP.replace("shared = [\"V\"]\n\n[estep]", "shared = [\"Q\"]\n\n[estep]")).unwrap();
        assert!(c.initial_params(&OneCompartmentModel).is_err());
        let c = RunConfig::from_toml(&TWO_POP.replace("kind = \"proportional\"\nsigma = 0.3", "kind = \"polynomial\"\ncoefficients = [0, 0, 0, 0]")).unwrap();
        assert!(c.error_model().is_err());
    }
}
