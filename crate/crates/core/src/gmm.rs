//! Full-covariance Gaussian-mixture EM on a point cloud.
//!
//! Used on the pooled stabilized samples to read off `(w_k, μ_k, Σ_k)`
//! directly. Seeding is k-means++; the best of several restarts by final
//! log-likelihood wins.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::math::logsumexp;
use crate::mixture::{Gaussian, MixtureParams, ParamError, Partition};
use crate::rng::{tag, StreamRng, Streams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("need at least {needed} points for {k} components in dimension {p}, got {got}")]
    TooFewPoints { needed: usize, got: usize, k: usize, p: usize },
    #[error("invalid GMM configuration: {0}")]
    Config(String),
    #[error("every restart collapsed: {0}")]
    Collapsed(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Relative change of the log-likelihood below which EM stops.
    pub tol: f64,
    pub n_init: usize,
}

impl GmmConfig {
    pub fn new(k: usize) -> Self {
        Self { k, max_iters: 500, tol: 1e-8, n_init: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: MixtureParams,
    pub loglik: f64,
    pub iterations: usize,
    /// Log-likelihood after each E-step of the winning restart.
    pub trace: Vec<f64>,
}

struct State {
    weights: Vec<f64>,
    comps: Vec<Gaussian>,
}

fn sample_cov(points: &[Vec<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    let p = mean.len();
    let mut s = DMatrix::zeros(p, p);
    for x in points {
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    s / points.len() as f64
}

/// Adds `1e-8·(trace/p)·I` when the smallest eigenvalue is below
/// `1e-12·trace/p`. Returns whether it did.
fn regularize(cov: &mut DMatrix<f64>) -> bool {
    let p = cov.nrows();
    let scale = cov.trace() / p as f64;
    let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if !(scale > 0.0 && min_eig >= 1e-12 * scale) {
        let s = if scale > 0.0 { scale } else { 1.0 };
        *cov += DMatrix::identity(p, p) * (1e-8 * s);
        true
    } else {
        false
    }
}

fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let n = points.len();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|x| d2(x, &points[centers[0]])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (j, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = j;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (j, x) in points.iter().enumerate() {
            dist[j] = dist[j].min(d2(x, &points[next]));
        }
    }
    centers
}

fn run_once(points: &[Vec<f64>], config: &GmmConfig, rng: &mut StreamRng) -> Result<(State, f64, Vec<f64>), GmmError> {
    let n = points.len();
    let p = points[0].len();
    let k = config.k;
    let overall_mean = DVector::from_iterator(p, (0..p).map(|c| points.iter().map(|x| x[c]).sum::<f64>() / n as f64));
    let mut overall = sample_cov(points, &overall_mean);
    regularize(&mut overall);
    let centers = seed_centers(points, k, rng);
    let mut state = State {
        weights: vec![1.0 / k as f64; k],
        comps: centers
            .iter()
            .map(|&c| Gaussian::new(DVector::from_column_slice(&points[c]), overall.clone()))
            .collect::<Result<_, _>>()?,
    };
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut terms = vec![0.0; k];
    for _ in 0..config.max_iters {
        // E-step
        let log_w: Vec<f64> = state.weights.iter().map(|w| w.ln()).collect();
        let mut ll = 0.0;
        for (j, x) in points.iter().enumerate() {
            for c in 0..k {
                terms[c] = log_w[c] + state.comps[c].logpdf(x);
            }
            let lse = logsumexp(&terms);
            ll += lse;
            for c in 0..k {
                resp[j * k + c] = (terms[c] - lse).exp();
            }
        }
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() <= config.tol * prev.abs() {
                break;
            }
        }
        // M-step
        let mut weights = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let nk: f64 = (0..n).map(|j| resp[j * k + c]).sum();
            if !(nk > 0.0) {
                return Err(GmmError::Collapsed(format!("component {} lost all its points", c + 1)));
            }
            let mut mu = DVector::zeros(p);
            for (j, x) in points.iter().enumerate() {
                let r = resp[j * k + c];
                for a in 0..p {
                    mu[a] += r * x[a];
                }
            }
            mu /= nk;
            let mut cov = DMatrix::zeros(p, p);
            for (j, x) in points.iter().enumerate() {
                let r = resp[j * k + c];
                for a in 0..p {
                    for b in 0..p {
                        cov[(a, b)] += r * (x[a] - mu[a]) * (x[b] - mu[b]);
                    }
                }
            }
            cov /= nk;
            if regularize(&mut cov) {
                log::warn!("GMM component {} covariance collapsed; regularized", c + 1);
            }
            weights.push(nk / n as f64);
            comps.push(Gaussian::new(mu, cov)?);
        }
        state = State { weights, comps };
    }
    let ll = *trace.last().expect("at least one E-step");
    Ok((state, ll, trace))
}

/// Fits a `config.k`-component mixture to `points`. Restart `r` uses the
/// substream `(GMM, r)` of `streams`.
pub fn gmm_fit(points: &[Vec<f64>], config: &GmmConfig, streams: &Streams) -> Result<GmmFit, GmmError> {
    if config.k == 0 || config.n_init == 0 || config.max_iters == 0 || !(config.tol > 0.0) {
        return Err(GmmError::Config(format!("{config:?}")));
    }
    let p = points.first().map(|x| x.len()).unwrap_or(0);
    let needed = config.k * (p + 1);
    if p == 0 || points.len() < needed {
        return Err(GmmError::TooFewPoints { needed, got: points.len(), k: config.k, p });
    }
    if points.iter().any(|x| x.len() != p) {
        return Err(GmmError::Config("points have differing dimensions".into()));
    }
    let runs: Vec<Result<(State, f64, Vec<f64>), GmmError>> = (0..config.n_init)
        .into_par_iter()
        .map(|r| run_once(points, config, &mut streams.substream(&[tag::GMM, r as u64])))
        .collect();
    let mut best: Option<(State, f64, Vec<f64>)> = None;
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(r) if best.as_ref().is_none_or(|b| r.1 > b.1) => best = Some(r),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let (state, loglik, trace) =
        best.ok_or_else(|| GmmError::Collapsed(last_err.map(|e| e.to_string()).unwrap_or_default()))?;
    let total: f64 = state.weights.iter().sum();
    let weights = state.weights.iter().map(|w| w / total).collect();
    let means = state.comps.iter().map(|g| g.mean().clone()).collect();
    let covs = state.comps.iter().map(|g| g.cov().clone()).collect();
    let params = MixtureParams::new(weights, means, covs, None, Partition::all_mixed())?;
    Ok(GmmFit { params, loglik, iterations: trace.len(), trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut StreamRng, n: usize, center: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); vec![center + z] }).collect()
    }

    #[test]
    fn single_component_gives_sample_moments() {
        let mut rng = StreamRng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![1.0 + a, 2.0 + 0.5 * a + b]
            })
            .collect();
        let fit = gmm_fit(&pts, &GmmConfig::new(1), &Streams::new(0)).unwrap();
        let n = pts.len() as f64;
        let mean = DVector::from_iterator(2, (0..2).map(|c| pts.iter().map(|x| 1.0 * x[c]).sum::<f64>() / n));
        let mut cov = DMatrix::zeros(2, 2);
        for x in &pts {
            for a in 0..2 {
                for b in 0..2 {
                    cov[(a, b)] += 1.0 * (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        cov /= n;
        assert_eq!(fit.params.mean(0), &mean);
        assert_eq!(fit.params.cov(0), &cov);
        assert_eq!(fit.params.weights(), &[1.0]);
    }

    #[test]
    fn separated_clusters_and_monotone_trace() {
        let mut rng = StreamRng::seed_from_u64(2);
        let mut pts = normals(&mut rng, 500, 0.0);
        pts.extend(normals(&mut rng, 500, 10.0));
        let fit = gmm_fit(&pts, &GmmConfig::new(2), &Streams::new(4)).unwrap();
        let mut m: Vec<(f64, f64)> = (0..2).map(|k| (fit.params.mean(k)[0], fit.params.weights()[k])).collect();
        m.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(m[0].0.abs() < 0.15 && (m[1].0 - 10.0).abs() < 0.15, "{m:?}");
        assert!((m[0].1 - 0.5).abs() < 0.05);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = vec![vec![0.0, 1.0]; 5];
        assert!(matches!(gmm_fit(&pts, &GmmConfig::new(2), &Streams::new(0)), Err(GmmError::TooFewPoints { .. })));
    }

    #[test]
    fn constant_points_are_regularized() {
        let pts = vec![vec![3.0]; 10];
        let fit = gmm_fit(&pts, &GmmConfig::new(1), &Streams::new(0)).unwrap();
        assert_eq!(fit.params.mean(0)[0], 3.0);
        assert!(fit.params.cov(0)[(0, 0)] > 0.0);
    }
}
