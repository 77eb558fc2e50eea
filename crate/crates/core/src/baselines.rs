//! Reference detectors: maximum softmax probability, DOCTOR (temperature
//! scaled Gini purity), a pre-logits Mahalanobis detector and feature
//! squeezing. Every score is oriented so that higher means more trustworthy.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refnet::{softmax, Network};
use crate::tensor::{Tensor, TensorArchive};

const SIMPLEX_TOL: f64 = 1e-6;

/// `max_l z_l`.
pub fn msp(z: &[f64]) -> Result<f64> {
    let sum: f64 = z.iter().sum();
    if z.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOL || z.iter().any(|&p| p < -SIMPLEX_TOL) {
        return Err(Error::invalid("msp expects a probability vector"));
    }
    Ok(z.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `sum_l softmax(logits / T)_l^2`.
pub fn doctor_score(logits: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("doctor score of an empty logit vector"));
    }
    let scaled = DVector::from_iterator(logits.len(), logits.iter().map(|l| l / temperature));
    Ok(softmax(&scaled).iter().map(|p| p * p).sum())
}

/// Class-conditional Gaussians with a shared covariance on pre-logits features.
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    means: Vec<DVector<f64>>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    cal_min: f64,
    cal_max: f64,
}

impl MahalanobisModel {
    fn from_parts(means: Vec<DVector<f64>>, cov: DMatrix<f64>, cal_min: f64, cal_max: f64) -> Result<Self> {
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::numerical("shared covariance is not positive definite"))?;
        Ok(MahalanobisModel {
            means,
            cov,
            chol,
            cal_min,
            cal_max,
        })
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `(min, max)` of raw scores on the calibration set.
    pub fn calibration(&self) -> (f64, f64) {
        (self.cal_min, self.cal_max)
    }

    /// True when calibration saw a single distinct raw value.
    pub fn is_degenerate(&self) -> bool {
        self.cal_max <= self.cal_min
    }

    /// Squared Mahalanobis distance to the mean of class `l`.
    pub fn distance(&self, x: &DVector<f64>, l: usize) -> f64 {
        let d = x - &self.means[l];
        self.chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("cholesky factor has a positive diagonal")
            .norm_squared()
    }

    /// `-min_l (x - mu_l)^T S^-1 (x - mu_l)`.
    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.cov.nrows() {
            return Err(Error::shape(format!(
                "feature has length {}, detector expects {}",
                x.len(),
                self.cov.nrows()
            )));
        }
        let x = DVector::from_column_slice(x);
        Ok(-(0..self.means.len())
            .map(|l| self.distance(&x, l))
            .fold(f64::INFINITY, f64::min))
    }

    /// Records the raw-score range of `features` for min-max scaling.
    pub fn calibrate(&mut self, features: &[Vec<f64>]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::invalid("calibration set is empty"));
        }
        let raws = features.iter().map(|f| self.raw_score(f)).collect::<Result<Vec<_>>>()?;
        self.cal_min = raws.iter().copied().fold(f64::INFINITY, f64::min);
        self.cal_max = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(())
    }

    pub fn write_to(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        let dim = self.cov.nrows();
        let means: Vec<f64> = self.means.iter().flat_map(|m| m.iter().copied()).collect();
        archive.insert(format!("{prefix}/means"), Tensor::from_f64(vec![self.means.len(), dim], means)?)?;
        archive.insert(format!("{prefix}/cov"), Tensor::from_matrix(&self.cov))?;
        archive.insert(format!("{prefix}/calibration"), Tensor::vector_f64(vec![self.cal_min, self.cal_max]))?;
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let means = archive.require(&format!("{prefix}/means"))?.to_matrix()?;
        let cov = archive.require(&format!("{prefix}/cov"))?.to_matrix()?;
        let cal = archive.require(&format!("{prefix}/calibration"))?.to_f64_vec();
        if cal.len() != 2 || means.ncols() != cov.nrows() {
            return Err(Error::shape(format!("detector `{prefix}` has inconsistent shapes")));
        }
        let means = means.row_iter().map(|r| r.transpose()).collect();
        MahalanobisModel::from_parts(means, cov, cal[0], cal[1])
    }
}

/// Per-class means and the pooled within-class covariance (`+ reg I`).
pub fn fit_dmd(features: &[Vec<f64>], labels: &[usize], n_labels: usize, reg: f64) -> Result<MahalanobisModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::shape("features and labels must align and be non-empty"));
    }
    let dim = features[0].len();
    let mut sums = vec![DVector::zeros(dim); n_labels];
    let mut counts = vec![0usize; n_labels];
    for (f, &l) in features.iter().zip(labels) {
        if l >= n_labels || f.len() != dim {
            return Err(Error::invalid(format!("bad sample: label {l}, dimension {}", f.len())));
        }
        sums[l] += DVector::from_column_slice(f);
        counts[l] += 1;
    }
    if let Some(l) = counts.iter().position(|&c| c < 2) {
        return Err(Error::invalid(format!("class {l} has fewer than 2 samples")));
    }
    let means: Vec<DVector<f64>> = sums.into_iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mut cov = DMatrix::zeros(dim, dim);
    for (f, &l) in features.iter().zip(labels) {
        let d = DVector::from_column_slice(f) - &means[l];
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= features.len() as f64;
    for i in 0..dim {
        cov[(i, i)] += reg;
    }
    // uncalibrated: unit-width band below zero distance
    MahalanobisModel::from_parts(means, cov, -1.0, 0.0)
}

/// Min-max scaled raw score, clamped to `[0, 1]`.
pub fn dmd_score(model: &MahalanobisModel, feature: &[f64]) -> Result<f64> {
    let raw = model.raw_score(feature)?;
    if model.is_degenerate() {
        return Ok(if raw >= model.cal_max { 1.0 } else { 0.0 });
    }
    Ok(((raw - model.cal_min) / (model.cal_max - model.cal_min)).clamp(0.0, 1.0))
}

fn check_unit_range(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("squeezers expect values in [0, 1]"));
    }
    Ok(())
}

/// `round(x (2^i - 1)) / (2^i - 1)` element-wise.
pub fn bit_reduce(values: &[f64], bits: u32) -> Result<Vec<f64>> {
    if !(1..=8).contains(&bits) {
        return Err(Error::invalid(format!("bit depth {bits} outside 1..=8")));
    }
    check_unit_range(values)?;
    let levels = f64::from((1u32 << bits) - 1);
    Ok(values.iter().map(|v| (v * levels).round() / levels).collect())
}

/// Per-channel `k x k` median with edge replication on a `c x h x w` image.
pub fn median_filter(image: &Tensor, k: usize) -> Result<Tensor> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!("median kernel must be odd and >= 3, got {k}")));
    }
    if image.rank() != 3 {
        return Err(Error::shape("median filter expects a c x h x w image"));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let x = image.to_f64_vec();
    check_unit_range(&x)?;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                window.clear();
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xc = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(x[(ch * h + yy) * w + xc]);
                    }
                }
                window.sort_by(f64::total_cmp);
                out[(ch * h + y) * w + xx] = window[window.len() / 2];
            }
        }
    }
    Tensor::from_f64(image.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqueezeConfig {
    pub bit_depths: Vec<u32>,
    pub median_kernels: Vec<usize>,
    /// `(c, h, w)` layout of the flat input; `None` reads it as `1 x 1 x d`.
    pub image_shape: Option<(usize, usize, usize)>,
}

impl Default for SqueezeConfig {
    fn default() -> Self {
        SqueezeConfig {
            bit_depths: vec![4],
            median_kernels: vec![3],
            image_shape: None,
        }
    }
}

/// `1 - max_f |z(x) - z(f(x))|_1 / 2` over the configured squeezers. The
/// input is clamped to `[0, 1]` before squeezing.
pub fn fs_score<N: Network + ?Sized>(net: &N, x: &[f64], cfg: &SqueezeConfig) -> Result<f64> {
    let (c, h, w) = cfg.image_shape.unwrap_or((1, 1, x.len()));
    if c * h * w != x.len() {
        return Err(Error::shape(format!("image shape {c}x{h}x{w} does not hold {} values", x.len())));
    }
    let clamped: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let z = net.probabilities(x)?;
    let mut raw: f64 = 0.0;
    let mut filtered = Vec::new();
    for &bits in &cfg.bit_depths {
        filtered.push(bit_reduce(&clamped, bits)?);
    }
    for &k in &cfg.median_kernels {
        let img = Tensor::from_f64(vec![c, h, w], clamped.clone())?;
        filtered.push(median_filter(&img, k)?.to_f64_vec());
    }
    for f in filtered {
        let zf = net.probabilities(&f)?;
        raw = raw.max((&z - zf).abs().sum());
    }
    Ok((1.0 - raw / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::AffineMap;
    use crate::refnet::MlpNet;
    use crate::rng::SeededRng;

    #[test]
    fn msp_cases() {
        assert_eq!(msp(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert!((msp(&[0.01; 100]).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(msp(&[0.6, 0.3, 0.1]).unwrap(), 0.6);
        assert!(msp(&[0.6, 0.6]).is_err());
    }

    #[test]
    fn doctor_cases() {
        let s = doctor_score(&[2.0, 1.0, 0.0], 1.0).unwrap();
        let e = [2f64.exp(), 1f64.exp(), 1.0];
        let total: f64 = e.iter().sum();
        let oracle: f64 = e.iter().map(|v| (v / total).powi(2)).sum();
        assert!((s - oracle).abs() < 1e-14);
        assert!((s - 0.5105).abs() < 1e-4, "{s}");
        assert!((doctor_score(&[3.0; 4], 2.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(doctor_score(&[200.0, 0.0, 0.0], 1.0).unwrap() > 1.0 - 1e-12);
        assert!(doctor_score(&[1.0], 0.0).is_err());
    }

    #[test]
    fn doctor_and_msp_ignore_logit_offsets() {
        let logits = [1.5, -0.3, 0.2];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.0).collect();
        assert!((doctor_score(&logits, 1.5).unwrap() - doctor_score(&shifted, 1.5).unwrap()).abs() < 1e-14);
        let z1 = softmax(&DVector::from_column_slice(&logits));
        let z2 = softmax(&DVector::from_vec(shifted));
        assert!((msp(z1.as_slice()).unwrap() - msp(z2.as_slice()).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn dmd_hand_example() {
        // class 0: (0,0), (2,0); class 1: (0,2), (0,4)
        let f = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![0.0, 4.0]];
        let m = fit_dmd(&f, &[0, 0, 1, 1], 2, 0.0).unwrap();
        assert_eq!(m.means()[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(m.means()[1].as_slice(), &[0.0, 3.0]);
        // deviations (-1,0),(1,0),(0,-1),(0,1) -> pooled cov = diag(0.5, 0.5)
        assert!((m.covariance() - DMatrix::from_diagonal_element(2, 2, 0.5)).amax() < 1e-15);
        // (1,1): distances 1/0.5 = 2 and (1 + 4)/0.5 = 10
        assert!((m.raw_score(&[1.0, 1.0]).unwrap() + 2.0).abs() < 1e-12);
        assert_eq!(m.raw_score(&[0.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn dmd_identity_covariance_is_euclidean() {
        let mut rng = SeededRng::new(3);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for t in 0..40 {
            f.push(vec![rng.normal() + (t % 2) as f64 * 5.0, rng.normal()]);
            l.push(t % 2);
        }
        let mut m = fit_dmd(&f, &l, 2, 0.0).unwrap();
        m.cov = DMatrix::identity(2, 2);
        m.chol = Cholesky::new(m.cov.clone()).unwrap();
        let x = [0.7, -0.4];
        let d0 = (x[0] - m.means[0][0]).powi(2) + (x[1] - m.means[0][1]).powi(2);
        let d1 = (x[0] - m.means[1][0]).powi(2) + (x[1] - m.means[1][1]).powi(2);
        assert!((m.raw_score(&x).unwrap() + d0.min(d1)).abs() < 1e-12);
    }

    #[test]
    fn dmd_is_affine_invariant() {
        let mut rng = SeededRng::new(5);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for t in 0..60 {
            f.push(vec![rng.normal() + (t % 3) as f64, 0.5 * rng.normal()]);
            l.push(t % 3);
        }
        let m = fit_dmd(&f, &l, 3, 0.0).unwrap();
        for _ in 0..5 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.normal());
            if a.determinant().abs() < 0.1 {
                continue;
            }
            let tf: Vec<Vec<f64>> = f
                .iter()
                .map(|x| (&a * DVector::from_column_slice(x)).as_slice().to_vec())
                .collect();
            let mt = fit_dmd(&tf, &l, 3, 0.0).unwrap();
            let probe = [0.3, -0.2];
            let tp = &a * DVector::from_column_slice(&probe);
            assert!((m.raw_score(&probe).unwrap() - mt.raw_score(tp.as_slice()).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn dmd_score_scaling() {
        let f = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![0.0, 4.0]];
        let mut m = fit_dmd(&f, &[0, 0, 1, 1], 2, 1e-9).unwrap();
        // every training point is at distance 2 from its own mean
        m.calibrate(&f).unwrap();
        assert!(m.is_degenerate());
        assert_eq!(dmd_score(&m, &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(dmd_score(&m, &[9.0, 9.0]).unwrap(), 0.0);

        let cal = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![3.0, 0.0]];
        m.calibrate(&cal).unwrap();
        let (lo, hi) = m.calibration();
        assert!(lo < hi);
        assert!((dmd_score(&m, &[0.0, 0.0]).unwrap() - (-2.0 - lo) / (hi - lo)).abs() < 1e-9);
        for x in &f {
            let s = dmd_score(&m, x).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
        assert_eq!(dmd_score(&m, &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(dmd_score(&m, &[100.0, -100.0]).unwrap(), 0.0);
        assert!(fit_dmd(&f[..3], &[0, 0, 1], 2, 0.0).is_err());
    }

    #[test]
    fn squeezers() {
        assert_eq!(bit_reduce(&[0.6], 1).unwrap(), vec![1.0]);
        assert_eq!(bit_reduce(&[0.2, 0.5], 2).unwrap(), vec![1.0 / 3.0, 2.0 / 3.0]);
        assert!(bit_reduce(&[1.5], 3).is_err());

        let flat = Tensor::from_f64(vec![2, 3, 3], vec![0.4; 18]).unwrap();
        assert_eq!(median_filter(&flat, 3).unwrap(), flat);
        assert!(median_filter(&flat, 2).is_err());

        let spike = Tensor::from_f64(vec![1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(median_filter(&spike, 3).unwrap().to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fs_identity_filters_score_one() {
        let net = MlpNet::new(vec![AffineMap::new(DMatrix::from_fn(3, 4, |r, c| (r + c) as f64), DVector::zeros(3)).unwrap()]).unwrap();
        // a 1-bit image that is constant is left unchanged by both squeezers
        let x = [1.0, 1.0, 1.0, 1.0];
        let cfg = SqueezeConfig { bit_depths: vec![1, 3], median_kernels: vec![3], image_shape: Some((1, 2, 2)) };
        assert_eq!(fs_score(&net, &x, &cfg).unwrap(), 1.0);

        let y = [0.1, 0.9, 0.33, 0.6];
        let s = fs_score(&net, &y, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn archive_round_trip() {
        let f = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![0.0, 4.0]];
        let mut m = fit_dmd(&f, &[0, 0, 1, 1], 2, 1e-6).unwrap();
        m.calibrate(&f).unwrap();
        let mut ar = TensorArchive::new();
        m.write_to(&mut ar, "dmd").unwrap();
        let back = MahalanobisModel::read_from(&ar, "dmd").unwrap();
        assert_eq!(back.calibration(), m.calibration());
        assert_eq!(back.raw_score(&[0.3, 0.1]).unwrap(), m.raw_score(&[0.3, 0.1]).unwrap());
    }
}
