//! Full-covariance Gaussian mixtures fitted with EM, and the membership
//! vectors they induce on corevectors.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorArchive};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Added to every covariance diagonal.
    pub reg_lambda: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            max_iter: 200,
            tol: 1e-6,
            reg_lambda: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `-0.5 * (kappa * ln 2pi + ln det K) + ln phi`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let kappa = mean.len() as f64;
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::numerical("covariance is not positive definite after regularization"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = weight.ln() - 0.5 * (kappa * (2.0 * PI).ln() + log_det);
        Ok(Component {
            weight,
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    fn log_density(&self, v: &DVector<f64>) -> f64 {
        let diff = v - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

#[derive(Debug, Clone)]
pub struct GmmModel {
    components: Vec<Component>,
    reg_lambda: f64,
    ll_trace: Vec<f64>,
}

/// Soft cluster assignment; non-negative and sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipVector(pub DVector<f64>);

impl MembershipVector {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Normalizes `exp(log_densities)` with log-sum-exp.
pub fn membership_from_log_densities(log_densities: &[f64]) -> MembershipVector {
    let max = log_densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut m: DVector<f64> = DVector::from_iterator(
        log_densities.len(),
        log_densities.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }),
    );
    let total = m.sum();
    m /= total;
    MembershipVector(m)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    /// Builds a model from explicit parameters. `covs` are used as given
    /// (they already include any regularization).
    pub fn from_parameters(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        reg_lambda: f64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::shape("mixture parameter lists differ in length"));
        }
        let kappa = means[0].len();
        if means.iter().any(|m| m.len() != kappa) || covs.iter().any(|c| c.shape() != (kappa, kappa)) {
            return Err(Error::shape("mixture components have inconsistent dimensions"));
        }
        let components = weights
            .into_iter()
            .zip(means)
            .zip(covs)
            .map(|((w, m), c)| Component::new(w, m, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmModel {
            components,
            reg_lambda,
            ll_trace: Vec::new(),
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<&DVector<f64>> {
        self.components.iter().map(|c| &c.mean).collect()
    }

    pub fn covariances(&self) -> Vec<&DMatrix<f64>> {
        self.components.iter().map(|c| &c.cov).collect()
    }

    pub fn reg_lambda(&self) -> f64 {
        self.reg_lambda
    }

    /// Mean log-likelihood at initialization followed by one value per EM step.
    pub fn ll_trace(&self) -> &[f64] {
        &self.ll_trace
    }

    /// `ln(phi_i N(v; mu_i, K_i))` for every component.
    pub fn log_densities(&self, v: &DVector<f64>) -> Vec<f64> {
        self.components.iter().map(|c| c.log_density(v)).collect()
    }

    pub fn membership(&self, v: &DVector<f64>) -> Result<MembershipVector> {
        self.check_dim(v)?;
        Ok(membership_from_log_densities(&self.log_densities(v)))
    }

    /// Most probable cluster; ties go to the lowest index.
    pub fn hard_assign(&self, v: &DVector<f64>) -> Result<usize> {
        Ok(argmax(self.membership(v)?.as_slice()))
    }

    /// Mean log-likelihood of `data`.
    pub fn log_likelihood(&self, data: &[DVector<f64>]) -> f64 {
        self.total_log_likelihood(data) / data.len() as f64
    }

    pub fn total_log_likelihood(&self, data: &[DVector<f64>]) -> f64 {
        data.iter().map(|v| log_sum_exp(&self.log_densities(v))).sum()
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!(
                "corevector has length {}, mixture expects {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Responsibilities (rows = samples) and the total log-likelihood.
    fn e_step(&self, data: &[DVector<f64>]) -> (Vec<Vec<f64>>, f64) {
        let mut total = 0.0;
        let resp = data
            .iter()
            .map(|v| {
                let logs = self.log_densities(v);
                total += log_sum_exp(&logs);
                membership_from_log_densities(&logs).0.as_slice().to_vec()
            })
            .collect();
        (resp, total)
    }

    /// One full EM iteration starting from the current parameters.
    pub fn em_step(&self, data: &[DVector<f64>]) -> Result<GmmModel> {
        let (resp, _) = self.e_step(data);
        let fallback: Vec<(DVector<f64>, DMatrix<f64>)> =
            self.components.iter().map(|c| (c.mean.clone(), c.cov.clone())).collect();
        m_step(data, &resp, self.reg_lambda, &fallback)
    }

    pub fn write_to(&self, archive: &mut TensorArchive, layer: &str) -> Result<()> {
        let c = self.n_components();
        let k = self.dim();
        archive.insert(format!("{layer}/gmm_phi"), Tensor::vector_f64(self.weights()))?;
        let mu: Vec<f64> = self.components.iter().flat_map(|c| c.mean.iter().copied()).collect();
        archive.insert(format!("{layer}/gmm_mu"), Tensor::from_f64(vec![c, k], mu)?)?;
        let mut cov = Vec::with_capacity(c * k * k);
        for comp in &self.components {
            for r in 0..k {
                for col in 0..k {
                    cov.push(comp.cov[(r, col)]);
                }
            }
        }
        archive.insert(format!("{layer}/gmm_cov"), Tensor::from_f64(vec![c, k, k], cov)?)?;
        archive.insert(format!("{layer}/gmm_reg"), Tensor::scalar_f64(self.reg_lambda))?;
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, layer: &str) -> Result<Self> {
        let phi = archive.require(&format!("{layer}/gmm_phi"))?.to_f64_vec();
        let mu = archive.require(&format!("{layer}/gmm_mu"))?;
        let cov = archive.require(&format!("{layer}/gmm_cov"))?;
        let c = phi.len();
        if mu.rank() != 2 || mu.shape()[0] != c {
            return Err(Error::shape(format!("`{layer}/gmm_mu` must be {c} x kappa")));
        }
        let k = mu.shape()[1];
        if cov.shape() != [c, k, k] {
            return Err(Error::shape(format!("`{layer}/gmm_cov` must be {c} x {k} x {k}")));
        }
        let mu = mu.to_f64_vec();
        let cov = cov.to_f64_vec();
        let means = (0..c).map(|i| DVector::from_column_slice(&mu[i * k..(i + 1) * k])).collect();
        let covs = (0..c)
            .map(|i| DMatrix::from_row_slice(k, k, &cov[i * k * k..(i + 1) * k * k]))
            .collect();
        let reg = match archive.get(&format!("{layer}/gmm_reg")) {
            Some(t) => t.to_scalar_f64()?,
            None => 0.0,
        };
        GmmModel::from_parameters(phi, means, covs, reg)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Weighted means and covariances from responsibilities. A component whose
/// responsibility mass is zero keeps its `fallback` mean and covariance.
fn m_step(
    data: &[DVector<f64>],
    resp: &[Vec<f64>],
    reg_lambda: f64,
    fallback: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<GmmModel> {
    let c = fallback.len();
    let k = data[0].len();
    let n = data.len() as f64;
    let mut weights = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut covs = Vec::with_capacity(c);
    for comp in 0..c {
        let mass: f64 = resp.iter().map(|r| r[comp]).sum();
        if mass <= 0.0 {
            weights.push(0.0);
            means.push(fallback[comp].0.clone());
            covs.push(fallback[comp].1.clone());
            continue;
        }
        let mut mean = DVector::zeros(k);
        for (v, r) in data.iter().zip(resp) {
            mean.axpy(r[comp], v, 1.0);
        }
        mean /= mass;
        let mut cov = DMatrix::zeros(k, k);
        for (v, r) in data.iter().zip(resp) {
            let w = r[comp];
            if w == 0.0 {
                continue;
            }
            let d = v - &mean;
            cov.ger(w, &d, &d, 1.0);
        }
        cov /= mass;
        for i in 0..k {
            cov[(i, i)] += reg_lambda;
        }
        weights.push(mass / n);
        means.push(mean);
        covs.push(cov);
    }
    GmmModel::from_parameters(weights, means, covs, reg_lambda)
}

/// k-means++ seeding: indices of `c` distinct-by-construction centers.
fn kmeans_pp(data: &[DVector<f64>], c: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut centers = vec![rng.below(data.len())];
    let mut d2: Vec<f64> = data.iter().map(|v| (v - &data[centers[0]]).norm_squared()).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.below(data.len())
        } else {
            let mut target = rng.uniform() * total;
            let mut pick = data.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(next);
        for (d, v) in d2.iter_mut().zip(data) {
            *d = d.min((v - &data[next]).norm_squared());
        }
    }
    centers
}

/// Fits a `c`-component mixture with EM from a k-means++ hard initialization.
pub fn fit_gmm(data: &[DVector<f64>], c: usize, config: &GmmConfig) -> Result<GmmModel> {
    if c == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    if data.len() < c {
        return Err(Error::invalid(format!(
            "{} samples cannot support {c} mixture components",
            data.len()
        )));
    }
    let k = data[0].len();
    if k == 0 || data.iter().any(|v| v.len() != k) {
        return Err(Error::shape("corevectors must share one positive dimension"));
    }

    let mut rng = SeededRng::new(config.seed);
    let centers = kmeans_pp(data, c, &mut rng);
    let resp: Vec<Vec<f64>> = data
        .iter()
        .map(|v| {
            let dists: Vec<f64> = centers.iter().map(|&ci| -(v - &data[ci]).norm_squared()).collect();
            let mut r = vec![0.0; c];
            r[argmax(&dists)] = 1.0;
            r
        })
        .collect();

    let mut global_cov = DMatrix::zeros(k, k);
    let global_mean = data.iter().fold(DVector::zeros(k), |acc, v| acc + v) / data.len() as f64;
    for v in data {
        let d = v - &global_mean;
        global_cov.ger(1.0, &d, &d, 1.0);
    }
    global_cov /= data.len() as f64;
    for i in 0..k {
        global_cov[(i, i)] += config.reg_lambda;
    }
    let fallback: Vec<_> = centers.iter().map(|&ci| (data[ci].clone(), global_cov.clone())).collect();

    let mut model = m_step(data, &resp, config.reg_lambda, &fallback)?;
    let mut ll = model.log_likelihood(data);
    let mut trace = vec![ll];
    for _ in 0..config.max_iter {
        let next = model.em_step(data)?;
        let next_ll = next.log_likelihood(data);
        trace.push(next_ll);
        let improvement = next_ll - ll;
        model = next;
        ll = next_ll;
        if improvement < config.tol {
            break;
        }
    }
    model.ll_trace = trace;
    Ok(model)
}
