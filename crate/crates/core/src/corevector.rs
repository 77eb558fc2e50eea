//! Corevectors: projections of a layer input `[x; 1]` onto the top right
//! singular subspace of the layer's affine operator.

use nalgebra::{DMatrix, DVector, SVD};

use crate::affine::AffineMap;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorArchive};

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    qprime: DMatrix<f64>,
    sigma: Vec<f64>,
    tail_energy: f64,
    normalizer: Option<Normalizer>,
}

impl Projector {
    /// `(n + 1) x kappa`, orthonormal columns.
    pub fn qprime(&self) -> &DMatrix<f64> {
        &self.qprime
    }

    /// The retained singular values, non-increasing.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn kappa(&self) -> usize {
        self.qprime.ncols()
    }

    /// Layer input dimension `n` (without the bias coordinate).
    pub fn input_dim(&self) -> usize {
        self.qprime.nrows() - 1
    }

    /// Sum of squared discarded singular values.
    pub fn tail_energy(&self) -> f64 {
        self.tail_energy
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        if normalizer.mean.len() != self.kappa() || normalizer.std.len() != self.kappa() {
            return Err(Error::shape("normalizer dimension differs from kappa"));
        }
        self.normalizer = Some(normalizer);
        Ok(())
    }

    /// `v = Q'^T [x; 1]`.
    pub fn project(&self, x: &[f64]) -> Result<DVector<f64>> {
        let n = self.input_dim();
        if x.len() != n {
            return Err(Error::shape(format!(
                "activation has length {}, projector expects {n}",
                x.len()
            )));
        }
        let kappa = self.kappa();
        let mut v = DVector::zeros(kappa);
        for k in 0..kappa {
            let col = self.qprime.column(k);
            let mut acc = col[n];
            for (q, xi) in col.iter().zip(x) {
                acc += q * xi;
            }
            v[k] = acc;
        }
        Ok(v)
    }

    pub fn normalize(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let norm = self
            .normalizer
            .as_ref()
            .ok_or_else(|| Error::invalid("projector has no fitted normalizer"))?;
        if v.len() != norm.mean.len() {
            return Err(Error::shape("corevector dimension differs from normalizer"));
        }
        Ok((v - &norm.mean).component_div(&norm.std))
    }

    /// Project then normalize.
    pub fn corevector(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.normalize(&self.project(x)?)
    }

    pub fn write_to(&self, archive: &mut TensorArchive, layer: &str) -> Result<()> {
        archive.insert(format!("{layer}/qprime"), Tensor::from_matrix(&self.qprime))?;
        archive.insert(format!("{layer}/sigma"), Tensor::vector_f64(self.sigma.clone()))?;
        archive.insert(format!("{layer}/tail_energy"), Tensor::scalar_f64(self.tail_energy))?;
        if let Some(norm) = &self.normalizer {
            archive.insert(format!("{layer}/norm_mean"), Tensor::vector_f64(norm.mean.as_slice().to_vec()))?;
            archive.insert(format!("{layer}/norm_std"), Tensor::vector_f64(norm.std.as_slice().to_vec()))?;
        }
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, layer: &str) -> Result<Self> {
        let qprime = archive.require(&format!("{layer}/qprime"))?.to_matrix()?;
        let sigma = archive.require(&format!("{layer}/sigma"))?.to_f64_vec();
        if sigma.len() != qprime.ncols() || qprime.nrows() < 2 {
            return Err(Error::shape(format!("projector `{layer}` has inconsistent shapes")));
        }
        let tail_energy = match archive.get(&format!("{layer}/tail_energy")) {
            Some(t) => t.to_scalar_f64()?,
            None => 0.0,
        };
        let normalizer = match (
            archive.get(&format!("{layer}/norm_mean")),
            archive.get(&format!("{layer}/norm_std")),
        ) {
            (Some(m), Some(s)) => Some(Normalizer {
                mean: m.to_dvector(),
                std: s.to_dvector(),
            }),
            _ => None,
        };
        let mut p = Projector {
            qprime,
            sigma,
            tail_energy,
            normalizer: None,
        };
        if let Some(n) = normalizer {
            p.set_normalizer(n)?;
        }
        Ok(p)
    }
}

/// Truncated SVD of `A = [W | b]` keeping `kappa` right singular vectors.
///
/// Each kept column is sign-flipped so that its largest-magnitude entry is
/// positive.
pub fn fit_projector(map: &AffineMap, kappa: usize) -> Result<Projector> {
    let a = map.augmented();
    let (m, cols) = a.shape();
    let max_kappa = m.min(cols);
    if kappa == 0 || kappa > max_kappa {
        return Err(Error::invalid(format!(
            "kappa = {kappa} outside 1..={max_kappa} for a {m}x{cols} operator"
        )));
    }
    let svd = SVD::try_new(a, false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("SVD did not converge"))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numerical("SVD returned no right singular vectors"))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut qprime = DMatrix::zeros(cols, kappa);
    let mut sigma = Vec::with_capacity(kappa);
    for (k, &idx) in order.iter().take(kappa).enumerate() {
        let mut col: DVector<f64> = v_t.row(idx).transpose();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
            .0;
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        qprime.set_column(k, &col);
        sigma.push(svd.singular_values[idx]);
    }
    let tail_energy = order[kappa..]
        .iter()
        .map(|&i| svd.singular_values[i].powi(2))
        .fold(0.0, |acc, e| acc + e);

    Ok(Projector {
        qprime,
        sigma,
        tail_energy,
        normalizer: None,
    })
}

/// Per-dimension mean and population standard deviation (floored at
/// [`STD_FLOOR`]).
pub fn fit_normalizer(samples: &[DVector<f64>]) -> Result<Normalizer> {
    if samples.len() < 2 {
        return Err(Error::invalid("normalizer needs at least 2 samples"));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("corevectors have mixed dimensions"));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut var = DVector::zeros(dim);
    for s in samples {
        let d = s - &mean;
        var += d.component_mul(&d);
    }
    var /= n;
    let std = var.map(|v| v.sqrt().max(STD_FLOOR));
    Ok(Normalizer { mean, std })
}
