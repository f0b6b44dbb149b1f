//! Multivariate Gaussian kernels and the population mixture parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::ThetaVector;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SYMMETRY_TOL: f64 = 1e-10;
const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },
    #[error("covariance of component {component} is not symmetric")]
    NotSymmetric { component: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("weights must be non-negative and sum to 1, got {0:?}")]
    Weights(Vec<f64>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("residual scale sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("shared coordinate {coordinate} differs between components 1 and {component}")]
    SharedMismatch { coordinate: usize, component: usize },
    #[error("shared coordinate index {0} out of range")]
    Partition(usize),
    #[error("at least one component is required")]
    Empty,
}

/// A Gaussian with cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    /// Fails with `NotPositiveDefinite { component: 0 }`; callers relabel.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, ParamError> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(ParamError::Dimension(format!(
                "mean has length {p} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite("gaussian"));
        }
        for r in 0..p {
            for c in (r + 1)..p {
                let scale = cov[(r, r)].abs().max(cov[(c, c)].abs()).max(f64::MIN_POSITIVE);
                if (cov[(r, c)] - cov[(c, r)]).abs() > SYMMETRY_TOL * scale {
                    return Err(ParamError::NotSymmetric { component: 0 });
                }
            }
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(ParamError::NotPositiveDefinite { component: 0 })?;
        let chol_l = chol.l();
        let log_det: f64 = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(ParamError::NotPositiveDefinite { component: 0 });
        }
        let log_norm = -0.5 * (p as f64 * LN_2PI + log_det);
        Ok(Self { mean, cov, chol_l, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor `L` with `L L^T = cov`.
    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let p = self.dim();
        debug_assert_eq!(x.len(), p);
        // forward substitution L z = x - mean
        let mut buf = [0.0; 16];
        let mut heap = Vec::new();
        let z: &mut [f64] = if p <= buf.len() {
            &mut buf[..p]
        } else {
            heap.resize(p, 0.0);
            &mut heap
        };
        let mut quad = 0.0;
        for r in 0..p {
            let mut acc = x[r] - self.mean[r];
            for c in 0..r {
                acc -= self.chol_l[(r, c)] * z[c];
            }
            z[r] = acc / self.chol_l[(r, r)];
            quad += z[r] * z[r];
        }
        self.log_norm - 0.5 * quad
    }

    /// `mean + L z` with `z` i.i.d. standard normal, written into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let p = self.dim();
        let mut buf = [0.0; 16];
        let mut heap = Vec::new();
        let z: &mut [f64] = if p <= buf.len() {
            &mut buf[..p]
        } else {
            heap.resize(p, 0.0);
            &mut heap
        };
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for r in 0..p {
            let mut acc = self.mean[r];
            for c in 0..=r {
                acc += self.chol_l[(r, c)] * z[c];
            }
            out[r] = acc;
        }
    }
}

/// Log density of `N(mean, cov)` at `x`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64, ParamError> {
    if x.len() != mean.len() {
        return Err(ParamError::Dimension(format!("x has length {}, mean {}", x.len(), mean.len())));
    }
    let g = Gaussian::new(DVector::from_column_slice(mean), cov.clone())?;
    Ok(g.logpdf(x))
}

/// Structure imposed on covariance updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceForm {
    #[default]
    Full,
    Diagonal,
}

/// Split of the parameter coordinates into mixture-specific (alpha) and
/// shared (beta) sets. The default puts every coordinate in alpha.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    shared: Vec<usize>,
}

impl Partition {
    pub fn all_mixed() -> Self {
        Self::default()
    }

    pub fn with_shared(mut shared: Vec<usize>) -> Self {
        shared.sort_unstable();
        shared.dedup();
        Self { shared }
    }

    pub fn shared(&self) -> &[usize] {
        &self.shared
    }

    pub fn is_shared(&self, coord: usize) -> bool {
        self.shared.binary_search(&coord).is_ok()
    }

    pub fn mixed(&self, p: usize) -> Vec<usize> {
        (0..p).filter(|c| !self.is_shared(*c)).collect()
    }
}

/// Population parameters: weights, component Gaussians, optional residual
/// scale, and the alpha/beta partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
    sigma: Option<f64>,
    partition: Partition,
    weight_se: Vec<f64>,
}

impl MixtureParams {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        sigma: Option<f64>,
        partition: Partition,
    ) -> Result<Self, ParamError> {
        let k = weights.len();
        if k == 0 {
            return Err(ParamError::Empty);
        }
        if means.len() != k || covariances.len() != k {
            return Err(ParamError::Dimension(format!(
                "{k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (weights.iter().sum::<f64>() - 1.0).abs() > WEIGHT_SUM_TOL
        {
            return Err(ParamError::Weights(weights));
        }
        if let Some(s) = sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(ParamError::Sigma(s));
            }
        }
        let p = means[0].len();
        if p == 0 {
            return Err(ParamError::Dimension("zero-dimensional parameter".into()));
        }
        if let Some(&c) = partition.shared.iter().find(|&&c| c >= p) {
            return Err(ParamError::Partition(c));
        }
        let mut components = Vec::with_capacity(k);
        for (idx, (m, c)) in means.into_iter().zip(covariances).enumerate() {
            if m.len() != p {
                return Err(ParamError::Dimension(format!(
                    "component {} mean has length {}, expected {p}",
                    idx + 1,
                    m.len()
                )));
            }
            let g = Gaussian::new(m, c).map_err(|e| match e {
                ParamError::NotPositiveDefinite { .. } => {
                    ParamError::NotPositiveDefinite { component: idx + 1 }
                }
                ParamError::NotSymmetric { .. } => ParamError::NotSymmetric { component: idx + 1 },
                other => other,
            })?;
            components.push(g);
        }
        let params = Self { weights, components, sigma, partition, weight_se: vec![0.0; k] };
        params.check_shared()?;
        Ok(params)
    }

    /// Diagonal covariances from standard deviations.
    pub fn from_sds(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sds: Vec<Vec<f64>>,
        sigma: Option<f64>,
        partition: Partition,
    ) -> Result<Self, ParamError> {
        let means = means.into_iter().map(DVector::from_vec).collect();
        let covs = sds
            .into_iter()
            .map(|s| DMatrix::from_diagonal(&DVector::from_iterator(s.len(), s.iter().map(|v| v * v))))
            .collect();
        Self::new(weights, means, covs, sigma, partition)
    }

    fn check_shared(&self) -> Result<(), ParamError> {
        let first = &self.components[0];
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        for (k, g) in self.components.iter().enumerate().skip(1) {
            for &c in self.partition.shared() {
                let mut same = tol(g.mean[c], first.mean[c]);
                for r in 0..self.dim() {
                    // beta block and the alpha/beta cross terms must agree
                    same &= tol(g.cov[(c, r)], first.cov[(c, r)]);
                }
                if !same {
                    return Err(ParamError::SharedMismatch { coordinate: c, component: k + 1 });
                }
            }
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Monte Carlo standard errors of the weights (zero for exact inputs).
    pub fn weight_se(&self) -> &[f64] {
        &self.weight_se
    }

    pub fn with_weight_se(mut self, se: Vec<f64>) -> Self {
        assert_eq!(se.len(), self.weights.len());
        self.weight_se = se;
        self
    }

    pub fn component(&self, k: usize) -> &Gaussian {
        &self.components[k]
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        self.components[k].mean()
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        self.components[k].cov()
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn with_sigma(mut self, sigma: Option<f64>) -> Result<Self, ParamError> {
        if let Some(s) = sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(ParamError::Sigma(s));
            }
        }
        self.sigma = sigma;
        Ok(self)
    }

    /// Draw `theta ~ N(mu_k, Sigma_k)`.
    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> ThetaVector {
        let mut out = vec![0.0; self.dim()];
        self.components[k].sample_into(rng, &mut out);
        ThetaVector::new(out).expect("finite mean and Cholesky factor give finite draws")
    }

    /// Mixture log density `log Σ_k w_k N(x; mu_k, Sigma_k)`.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w.ln() + g.logpdf(x))
            .collect();
        crate::math::logsumexp(&terms)
    }

    /// Reorders components by `perm` (new index j takes old `perm[j]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: perm.iter().map(|&i| self.weights[i]).collect(),
            components: perm.iter().map(|&i| self.components[i].clone()).collect(),
            sigma: self.sigma,
            partition: self.partition.clone(),
            weight_se: perm.iter().map(|&i| self.weight_se[i]).collect(),
        }
    }

    /// Named scalar view of the parameters (see [`NamedValue`]).
    pub fn flatten(&self, names: &[String], form: CovarianceForm) -> Vec<NamedValue> {
        let p = self.dim();
        let mut out = Vec::new();
        for k in 0..self.num_components() {
            let comp = Some(k + 1);
            out.push(NamedValue::new(comp, "weight", self.weights[k]));
            for j in 0..p {
                out.push(NamedValue::new(comp, format!("mean.{}", names[j]), self.mean(k)[j]));
            }
            for j in 0..p {
                out.push(NamedValue::new(comp, format!("sd.{}", names[j]), self.cov(k)[(j, j)].sqrt()));
            }
            if form == CovarianceForm::Full {
                for a in 0..p {
                    for b in (a + 1)..p {
                        out.push(NamedValue::new(
                            comp,
                            format!("cov.{}.{}", names[a], names[b]),
                            self.cov(k)[(a, b)],
                        ));
                    }
                }
            }
        }
        if let Some(s) = self.sigma {
            out.push(NamedValue::new(None, "sigma", s));
        }
        out
    }
}

/// One reported scalar: component label (1-based, `None` for global
/// parameters), parameter name, value.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedValue {
    pub component: Option<usize>,
    pub name: String,
    pub value: f64,
}

impl NamedValue {
    pub fn new(component: Option<usize>, name: impl Into<String>, value: f64) -> Self {
        Self { component, name: name.into(), value }
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Permutation `perm` such that `other.permuted(&perm)` lines up with
/// `reference`, matching means by Mahalanobis distance under the reference
/// covariances. Exhaustive for `K <= 6`, greedy beyond.
pub fn align_components(reference: &MixtureParams, other: &MixtureParams) -> Vec<usize> {
    let k = reference.num_components();
    assert_eq!(k, other.num_components(), "component counts differ");
    let dist = |r: usize, o: usize| -> f64 {
        let g = reference.component(r);
        let x: Vec<f64> = other.mean(o).iter().copied().collect();
        // -2 (logpdf - log_norm) is the squared Mahalanobis distance
        -2.0 * (g.logpdf(&x) - g.logpdf(g.mean().as_slice()))
    };
    if k <= 6 {
        permutations(k)
            .into_iter()
            .min_by(|a, b| {
                let ca: f64 = a.iter().enumerate().map(|(r, &o)| dist(r, o)).sum();
                let cb: f64 = b.iter().enumerate().map(|(r, &o)| dist(r, o)).sum();
                ca.total_cmp(&cb)
            })
            .expect("at least one permutation")
    } else {
        let mut used = vec![false; k];
        (0..k)
            .map(|r| {
                let o = (0..k)
                    .filter(|o| !used[*o])
                    .min_by(|a, b| dist(r, *a).total_cmp(&dist(r, *b)))
                    .expect("unused component");
                used[o] = true;
                o
            })
            .collect()
    }
}
