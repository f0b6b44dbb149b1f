//! Synthetic datasets from known population parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::mixture::MixtureParams;
use crate::model::{DataError, DoseEvent, ErrorModel, Model, Observation, SubjectRecord, ThetaVector};
use crate::rng::{tag, Streams};

/// Consecutive non-evaluable draws tolerated for one subject.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("subject {subject}: more than {MAX_REDRAWS} consecutive parameter draws could not be evaluated (last: {last})")]
    TooManyRedraws { subject: usize, last: String },
    #[error("invalid simulation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone)]
pub struct SimSpec {
    pub truth: MixtureParams,
    pub n: usize,
    pub doses: Vec<DoseEvent>,
    pub times: Vec<f64>,
    pub covariates: BTreeMap<String, f64>,
    pub error: ErrorModel,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub subjects: Vec<SubjectRecord>,
    pub thetas: Vec<ThetaVector>,
    /// 0-based component each subject was drawn from.
    pub components: Vec<usize>,
    /// Non-evaluable draws discarded per subject.
    pub redraws: Vec<usize>,
}

fn pick_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // rounding in the cumulative sum; fall back to the last positive weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Subject `i` (id `i + 1`) uses substream `(SIMULATE, i)`: a categorical
/// component draw, then a Gaussian parameter draw (repeated while the model
/// cannot be evaluated), then one standard normal per observation.
pub fn simulate(spec: &SimSpec, model: &dyn Model, streams: &Streams) -> Result<Simulated, SimError> {
    if spec.n == 0 {
        return Err(SimError::Spec("n must be at least 1".into()));
    }
    if spec.times.is_empty() {
        return Err(SimError::Spec("no observation times".into()));
    }
    if spec.truth.dim() != model.dim() {
        return Err(SimError::Spec(format!(
            "truth has dimension {}, model expects {}",
            spec.truth.dim(),
            model.dim()
        )));
    }
    spec.error.validate().map_err(|e| SimError::Spec(e.to_string()))?;
    let template = SubjectRecord::new(
        "0",
        spec.doses.clone(),
        spec.times.iter().map(|&time| Observation { time, value: 0.0 }).collect(),
        spec.covariates.clone(),
    )?;
    model.check_subject(&template).map_err(|e| SimError::Spec(e.to_string()))?;

    let per_subject: Vec<_> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.substream(&[tag::SIMULATE, i as u64]);
            let subject = SubjectRecord::new(
                (i + 1).to_string(),
                template.doses().to_vec(),
                template.observations().to_vec(),
                template.covariates().clone(),
            )?;
            let mut redraws = 0;
            let (k, theta, pred) = loop {
                let k = pick_component(spec.truth.weights(), &mut rng);
                let theta = spec.truth.sample_component(k, &mut rng);
                let failure = match model.predict(&theta, &subject) {
                    Ok(pred) if pred.iter().all(|p| p.is_finite()) => break (k, theta, pred),
                    Ok(_) => "non-finite prediction".to_string(),
                    Err(e) => e.to_string(),
                };
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(SimError::TooManyRedraws { subject: i + 1, last: failure });
                }
            };
            let values: Vec<f64> = pred
                .iter()
                .map(|&p| {
                    let eps: f64 = rng.sample(StandardNormal);
                    p + spec.error.stdev(p) * eps
                })
                .collect();
            Ok((subject.with_values(&values), theta, k, redraws))
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    let mut out = Simulated { subjects: Vec::new(), thetas: Vec::new(), components: Vec::new(), redraws: Vec::new() };
    for (s, t, k, r) in per_subject {
        out.subjects.push(s);
        out.thetas.push(t);
        out.components.push(k);
        out.redraws.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Partition;
    use crate::pkmodels::OneCompartmentModel;

    fn two_pop_spec(n: usize, sigma: f64) -> SimSpec {
        SimSpec {
            truth: MixtureParams::from_sds(
                vec![0.8, 0.2],
                vec![vec![0.3, 20.0], vec![0.6, 20.0]],
                vec![vec![0.06, 2.0], vec![0.06, 2.0]],
                Some(0.1),
                Partition::with_shared(vec![1]),
            )
            .unwrap(),
            n,
            doses: vec![DoseEvent::bolus(0.0, 100.0)],
            times: vec![1.5, 2.0, 3.0, 4.0, 5.5],
            covariates: BTreeMap::new(),
            error: ErrorModel::proportional(sigma).unwrap(),
        }
    }

    #[test]
    fn noiseless_limit_reproduces_predictions() {
        let sim = simulate(&two_pop_spec(20, 1e-12), &OneCompartmentModel, &Streams::new(1)).unwrap();
        for (s, t) in sim.subjects.iter().zip(&sim.thetas) {
            let pred = OneCompartmentModel.predict(t, s).unwrap();
            for (o, p) in s.observations().iter().zip(pred) {
                assert!((o.value - p).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate(&two_pop_spec(50, 0.1), &OneCompartmentModel, &Streams::new(7)).unwrap();
        let b = simulate(&two_pop_spec(50, 0.1), &OneCompartmentModel, &Streams::new(7)).unwrap();
        assert_eq!(a.subjects, b.subjects);
        assert_eq!(a.thetas, b.thetas);
        let c = simulate(&two_pop_spec(50, 0.1), &OneCompartmentModel, &Streams::new(8)).unwrap();
        assert_ne!(a.subjects, c.subjects);
    }

    #[test]
    fn mixture_mean_of_rate_constant() {
        let sim = simulate(&two_pop_spec(20_000, 0.1), &OneCompartmentModel, &Streams::new(3)).unwrap();
        let mean_k = sim.thetas.iter().map(|t| t[0]).sum::<f64>() / 20_000.0;
        assert!((mean_k - 0.36).abs() < 0.005, "{mean_k}");
        // mixture variance of k: 0.06² + 0.8·0.2·0.3²
        let var_k = sim.thetas.iter().map(|t| (t[0] - mean_k).powi(2)).sum::<f64>() / 20_000.0;
        let expected = 0.0036 + 0.16 * 0.09;
        assert!((var_k / expected - 1.0).abs() < 0.05, "{var_k}");
        let var_v = sim.thetas.iter().map(|t| (t[1] - 20.0).powi(2)).sum::<f64>() / 20_000.0;
        assert!((var_v / 4.0 - 1.0).abs() < 0.05, "{var_v}");
        assert!(sim.redraws.iter().all(|&r| r == 0));
    }

    #[test]
    fn impossible_truth_is_reported() {
        let mut spec = two_pop_spec(3, 0.1);
        spec.truth = MixtureParams::from_sds(
            vec![1.0],
            vec![vec![0.3, -50.0]],
            vec![vec![0.06, 1.0]],
            Some(0.1),
            Partition::all_mixed(),
        )
        .unwrap();
        assert!(matches!(
            simulate(&spec, &OneCompartmentModel, &Streams::new(0)),
            Err(SimError::TooManyRedraws { subject: 1, .. })
        ));
    }

    #[test]
    fn component_draw_respects_zero_weights() {
        let mut rng = Streams::new(0).substream(&[1]);
        for _ in 0..1000 {
            assert_eq!(pick_component(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }
}
