//! The shipped structural models: a closed-form one-compartment bolus model
//! and the three-state voriconazole ODE model.

use crate::model::{Model, ModelError, SubjectRecord};
use crate::odesolve::{integrate, Event, OdeProblem, SolverConfig};

/// `C(t) = Σ_d (D_d / V) exp(-k (t - t_d))` over bolus doses given at or
/// before `t`. Parameter order `(k, V)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneCompartmentModel;

impl OneCompartmentModel {
    pub const PARAMS: [&'static str; 2] = ["k", "V"];
}

impl Model for OneCompartmentModel {
    fn dim(&self) -> usize {
        2
    }

    fn parameter_names(&self) -> Vec<String> {
        Self::PARAMS.iter().map(|s| s.to_string()).collect()
    }

    fn check_subject(&self, subject: &SubjectRecord) -> Result<(), ModelError> {
        if subject.doses().iter().any(|d| !d.is_bolus()) {
            return Err(ModelError::Unsupported(format!(
                "subject {} has an infusion; the one-compartment model takes bolus doses only",
                subject.id()
            )));
        }
        Ok(())
    }

    fn predict_into(&self, theta: &[f64], subject: &SubjectRecord, out: &mut [f64]) -> Result<(), ModelError> {
        if theta.len() != 2 {
            return Err(ModelError::Dimension { expected: 2, got: theta.len() });
        }
        let (k, v) = (theta[0], theta[1]);
        if !(v > 0.0) {
            return Err(ModelError::Domain { name: "V", value: v });
        }
        self.check_subject(subject)?;
        for (o, obs) in out.iter_mut().zip(subject.observations()) {
            let mut c = 0.0;
            for d in subject.doses().iter().filter(|d| d.time <= obs.time) {
                c += d.amount / v * (-k * (obs.time - d.time)).exp();
            }
            if !c.is_finite() {
                return Err(ModelError::NonFinite { time: obs.time });
            }
            *o = c;
        }
        Ok(())
    }
}

/// Voriconazole model with parameters
/// `(Ka, Vmax0, Km, Vc0, FA1, Kcp, Kpc)` and covariate `wt`:
///
/// ```text
/// dx1/dt = -Ka x1
/// dx2/dt =  Ka x1 + r_iv(t) - Vm x2 / (Km V + x2) - Kcp x2 + Kpc x3
/// dx3/dt =  Kcp x2 - Kpc x3
/// Vm = Vmax0 wt^0.75,  V = Vc0 wt,  C = x2 / V
/// ```
///
/// Boluses add `amount * FA1` to the depot `x1`; infusions feed `x2` at
/// `amount / duration`. The state starts at zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct VoriconazoleModel {
    pub solver: SolverConfig,
}

impl VoriconazoleModel {
    pub const PARAMS: [&'static str; 7] = ["Ka", "Vmax0", "Km", "Vc0", "FA1", "Kcp", "Kpc"];
    pub const WEIGHT: &'static str = "wt";

    pub fn new(solver: SolverConfig) -> Self {
        Self { solver }
    }

    /// Full state trajectory `(x1, x2, x3)` at the subject's observation times.
    pub fn states(&self, theta: &[f64], subject: &SubjectRecord) -> Result<Vec<[f64; 3]>, ModelError> {
        if theta.len() != 7 {
            return Err(ModelError::Dimension { expected: 7, got: theta.len() });
        }
        for (name, &v) in Self::PARAMS.iter().zip(theta) {
            if !(v > 0.0) {
                return Err(ModelError::Domain { name, value: v });
            }
        }
        let wt = subject
            .covariate(Self::WEIGHT)
            .ok_or_else(|| ModelError::MissingCovariate(Self::WEIGHT.into()))?;
        if !(wt > 0.0) {
            return Err(ModelError::Domain { name: "wt", value: wt });
        }
        let [ka, vmax0, km, vc0, fa1, kcp, kpc] = [theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], theta[6]];
        let vm = vmax0 * wt.powf(0.75);
        let v = vc0 * wt;
        let kmv = km * v;
        let rhs = move |_t: f64, x: &[f64; 3], r: &[f64; 3], dx: &mut [f64; 3]| {
            let absorbed = ka * x[0];
            dx[0] = -absorbed;
            dx[1] = absorbed + r[1] - vm * x[1] / (kmv + x[1]) - kcp * x[1] + kpc * x[2];
            dx[2] = kcp * x[1] - kpc * x[2];
        };
        let events = subject
            .doses()
            .iter()
            .map(|d| {
                if d.is_bolus() {
                    Event::Bolus { time: d.time, jump: [d.amount * fa1, 0.0, 0.0] }
                } else {
                    Event::Infusion { start: d.time, end: d.time + d.duration, rate: [0.0, d.amount / d.duration, 0.0] }
                }
            })
            .collect();
        let problem = OdeProblem {
            rhs,
            t0: 0.0,
            x0: [0.0; 3],
            events,
            output_times: subject.observation_times().collect(),
        };
        integrate(&problem, &self.solver).map_err(|source| ModelError::Integration { theta: theta.to_vec(), source })
    }
}

impl Model for VoriconazoleModel {
    fn dim(&self) -> usize {
        7
    }

    fn parameter_names(&self) -> Vec<String> {
        Self::PARAMS.iter().map(|s| s.to_string()).collect()
    }

    fn check_subject(&self, subject: &SubjectRecord) -> Result<(), ModelError> {
        match subject.covariate(Self::WEIGHT) {
            Some(w) if w > 0.0 => Ok(()),
            Some(w) => Err(ModelError::Domain { name: "wt", value: w }),
            None => Err(ModelError::MissingCovariate(Self::WEIGHT.into())),
        }
    }

    fn predict_into(&self, theta: &[f64], subject: &SubjectRecord, out: &mut [f64]) -> Result<(), ModelError> {
        let states = self.states(theta, subject)?;
        let v = theta[3] * subject.covariate(Self::WEIGHT).expect("checked in states");
        for ((o, x), obs) in out.iter_mut().zip(&states).zip(subject.observations()) {
            let c = x[1] / v;
            if !c.is_finite() {
                return Err(ModelError::NonFinite { time: obs.time });
            }
            *o = c;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DoseEvent, Observation};
    use std::collections::BTreeMap;

    const TIMES: [f64; 5] = [1.5, 2.0, 3.0, 4.0, 5.5];

    fn analytic_subject() -> SubjectRecord {
        SubjectRecord::new(
            "1",
            vec![DoseEvent::bolus(0.0, 100.0)],
            TIMES.iter().map(|&time| Observation { time, value: 1.0 }).collect(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn vori_subject(doses: Vec<DoseEvent>) -> SubjectRecord {
        let mut cov = BTreeMap::new();
        cov.insert("wt".to_string(), 16.5);
        SubjectRecord::new(
            "1",
            doses,
            (1..=24).map(|j| Observation { time: 2.0 * j as f64, value: 1.0 }).collect(),
            cov,
        )
        .unwrap()
    }

    #[test]
    fn one_compartment_reference_value() {
        let pred = OneCompartmentModel.predict(&[0.3, 20.0], &analytic_subject()).unwrap();
        assert!((pred[0] - 5.0 * (-0.45f64).exp()).abs() < 1e-12);
        assert!((pred[0] - 3.188_140_758).abs() < 1e-8);
    }

    #[test]
    fn one_compartment_initial_values_against_scalar_oracle() {
        let pred = OneCompartmentModel.predict(&[1.0, 50.0], &analytic_subject()).unwrap();
        let oracle = [0.44626032029685964, 0.2706705664732254, 0.09957413673572789, 0.03663127777746836, 0.008173542876928133];
        for (p, o) in pred.iter().zip(oracle) {
            assert!((p - o).abs() < 1e-15, "{p} vs {o}");
        }
    }

    #[test]
    fn one_compartment_without_elimination_is_flat() {
        let pred = OneCompartmentModel.predict(&[0.0, 20.0], &analytic_subject()).unwrap();
        assert!(pred.iter().all(|&c| c == 5.0));
    }

    #[test]
    fn one_compartment_rejects_bad_volume() {
        let s = analytic_subject();
        assert!(matches!(OneCompartmentModel.predict(&[0.3, 0.0], &s), Err(ModelError::Domain { name: "V", .. })));
        assert!(matches!(OneCompartmentModel.predict(&[-1e4, 20.0], &s), Err(ModelError::NonFinite { .. })));
    }

    #[test]
    fn empty_depot_stays_empty() {
        let s = vori_subject(vec![DoseEvent::infusion(0.0, 180.0, 2.0)]);
        let states = VoriconazoleModel::default()
            .states(&[2.26, 9.23, 10.32, 1.16, 0.73, 1.75, 1.38], &s)
            .unwrap();
        assert!(states.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn pure_accumulation_without_elimination() {
        let s = vori_subject(vec![DoseEvent::infusion(0.0, 180.0, 2.0)]);
        let model = VoriconazoleModel::default();
        // Vmax0, Kcp and Kpc must be positive for evaluation; use states() on a
        // direct problem instead to switch elimination off entirely.
        let tiny = 1e-300;
        let states = model.states(&[2.26, tiny, 10.32, 1.16, 0.73, tiny, tiny], &s).unwrap();
        let last = states.last().unwrap();
        assert!((last[1] - 180.0).abs() < 1e-6, "{last:?}");
        let conc = model.predict(&[2.26, tiny, 10.32, 1.16, 0.73, tiny, tiny], &s).unwrap();
        assert!((conc[23] - 180.0 / (1.16 * 16.5)).abs() < 1e-6);
    }

    #[test]
    fn mass_is_conserved_without_elimination() {
        let s = vori_subject(vec![DoseEvent::infusion(0.0, 180.0, 2.0), DoseEvent::bolus(24.0, 180.0)]);
        let model = VoriconazoleModel::default();
        let tiny = 1e-300;
        let theta = [2.26, tiny, 10.32, 1.16, 0.73, 1.75, 1.38];
        let states = model.states(&theta, &s).unwrap();
        for (x, t) in states.iter().zip(s.observation_times()) {
            let total: f64 = x.iter().sum();
            let given = if t < 24.0 { 180.0 } else if t == 24.0 { 180.0 } else { 180.0 + 180.0 * 0.73 };
            assert!((total - given).abs() < 1e-6, "t={t}: {total} vs {given}");
        }
    }

    #[test]
    fn zero_bioavailability_ignores_oral_dose() {
        let model = VoriconazoleModel::default();
        let with_oral = vori_subject(vec![DoseEvent::infusion(0.0, 180.0, 2.0), DoseEvent::bolus(24.0, 180.0)]);
        let without = vori_subject(vec![DoseEvent::infusion(0.0, 180.0, 2.0)]);
        // FA1 must be positive; the depot contribution at FA1 = 1e-300 underflows to zero
        let theta = [2.26, 9.23, 10.32, 1.16, 1e-300, 1.75, 1.38];
        let a = model.predict(&theta, &with_oral).unwrap();
        let b = model.predict(&theta, &without).unwrap();
        assert_eq!(a[..12], b[..12]);
        // after t = 24 the runs differ only through the solver restart
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * y.abs());
        }
    }

    #[test]
    fn missing_weight_and_bad_parameters() {
        let s = SubjectRecord::new("x", vec![], vec![Observation { time: 1.0, value: 1.0 }], BTreeMap::new()).unwrap();
        let model = VoriconazoleModel::default();
        assert!(matches!(model.check_subject(&s), Err(ModelError::MissingCovariate(_))));
        let s = vori_subject(vec![]);
        assert!(matches!(
            model.predict(&[2.26, 9.23, -1.0, 1.16, 0.73, 1.75, 1.38], &s),
            Err(ModelError::Domain { name: "Km", .. })
        ));
    }
}
