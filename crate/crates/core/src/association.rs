//! Cluster-to-label association `U`, per-layer label estimates `g = U m`,
//! and the `(kappa, C)` grid search.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::affine::AffineMap;
use crate::corevector::{fit_normalizer, fit_projector, Projector};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, GmmConfig, GmmModel, MembershipVector};
use crate::tensor::{Tensor, TensorArchive};

/// Column-stochastic `L x C` matrix estimating `P(label = l | cluster = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    u: DMatrix<f64>,
    counts: Vec<u64>,
}

/// Estimated label distribution for one layer; lies in the L-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEstimate(pub DVector<f64>);

impl LayerEstimate {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl AssociationMatrix {
    pub fn n_labels(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_clusters(&self) -> usize {
        self.u.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Joint counts `u[l][i]`, row-major `L x C`.
    pub fn count(&self, label: usize, cluster: usize) -> u64 {
        self.counts[label * self.n_clusters() + cluster]
    }

    pub fn write_to(&self, archive: &mut TensorArchive, layer: &str) -> Result<()> {
        archive.insert(format!("{layer}/assoc_u"), Tensor::from_matrix(&self.u))?;
        archive.insert(
            format!("{layer}/assoc_counts"),
            Tensor::from_i64(
                vec![self.n_labels(), self.n_clusters()],
                self.counts.iter().map(|&c| c as i64).collect(),
            )?,
        )?;
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, layer: &str) -> Result<Self> {
        let u = archive.require(&format!("{layer}/assoc_u"))?.to_matrix()?;
        let counts = match archive.get(&format!("{layer}/assoc_counts")) {
            Some(t) => t.to_i64_vec()?.into_iter().map(|c| c.max(0) as u64).collect(),
            None => vec![0; u.len()],
        };
        if counts.len() != u.len() {
            return Err(Error::shape(format!("`{layer}/assoc_counts` does not match U")));
        }
        Ok(AssociationMatrix { u, counts })
    }
}

/// Counts joint (label, cluster) events and normalizes each cluster column.
/// Clusters that received no samples get a uniform column.
pub fn fit_association(
    assignments: &[usize],
    labels: &[usize],
    n_labels: usize,
    n_clusters: usize,
) -> Result<AssociationMatrix> {
    if assignments.len() != labels.len() || assignments.is_empty() {
        return Err(Error::shape(format!(
            "{} assignments vs {} labels (need equal, non-zero lengths)",
            assignments.len(),
            labels.len()
        )));
    }
    if n_labels == 0 || n_clusters == 0 {
        return Err(Error::invalid("label and cluster counts must be positive"));
    }
    let mut counts = vec![0u64; n_labels * n_clusters];
    for (t, (&i, &l)) in assignments.iter().zip(labels).enumerate() {
        if i >= n_clusters || l >= n_labels {
            return Err(Error::invalid(format!(
                "sample {t}: cluster {i} / label {l} out of range ({n_clusters} clusters, {n_labels} labels)"
            )));
        }
        counts[l * n_clusters + i] += 1;
    }
    let mut u = DMatrix::zeros(n_labels, n_clusters);
    for i in 0..n_clusters {
        let total: u64 = (0..n_labels).map(|l| counts[l * n_clusters + i]).sum();
        for l in 0..n_labels {
            u[(l, i)] = if total == 0 {
                1.0 / n_labels as f64
            } else {
                counts[l * n_clusters + i] as f64 / total as f64
            };
        }
    }
    Ok(AssociationMatrix { u, counts })
}

pub fn layer_estimate(u: &AssociationMatrix, m: &MembershipVector) -> Result<LayerEstimate> {
    if m.0.len() != u.n_clusters() {
        return Err(Error::shape(format!(
            "membership has {} entries, U has {} clusters",
            m.0.len(),
            u.n_clusters()
        )));
    }
    Ok(LayerEstimate(u.matrix() * &m.0))
}

/// Indices sorted by decreasing value; equal values keep index order.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Fraction of samples whose label is among the `k` largest entries of `g`.
pub fn top_k_accuracy(estimates: &[LayerEstimate], labels: &[usize], k: usize) -> Result<f64> {
    if estimates.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} estimates vs {} labels",
            estimates.len(),
            labels.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::invalid("top-k accuracy of an empty set"));
    }
    let hits = estimates
        .iter()
        .zip(labels)
        .filter(|(g, &l)| descending_order(g.as_slice()).iter().take(k).any(|&i| i == l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Everything fitted for one analyzed layer.
#[derive(Debug, Clone)]
pub struct LayerModel {
    pub name: String,
    pub projector: Projector,
    pub gmm: GmmModel,
    pub association: AssociationMatrix,
}

impl LayerModel {
    /// Projector + normalizer + GMM + association on training activations.
    pub fn fit(
        name: &str,
        map: &AffineMap,
        activations: &[Vec<f64>],
        labels: &[usize],
        n_labels: usize,
        kappa: usize,
        n_clusters: usize,
        gmm_config: &GmmConfig,
    ) -> Result<Self> {
        let stage = |e: Error, s: &'static str| e.in_stage(name, s);
        let mut projector = fit_projector(map, kappa).map_err(|e| stage(e, "svd"))?;
        let raw = activations
            .iter()
            .map(|x| projector.project(x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| stage(e, "project"))?;
        let normalizer = fit_normalizer(&raw).map_err(|e| stage(e, "normalize"))?;
        projector.set_normalizer(normalizer)?;
        let vs: Vec<DVector<f64>> = raw
            .iter()
            .map(|v| projector.normalize(v))
            .collect::<Result<_>>()?;
        let gmm = fit_gmm(&vs, n_clusters, gmm_config).map_err(|e| stage(e, "gmm"))?;
        let assignments = vs
            .iter()
            .map(|v| gmm.hard_assign(v))
            .collect::<Result<Vec<_>>>()?;
        let association = fit_association(&assignments, labels, n_labels, n_clusters)
            .map_err(|e| stage(e, "association"))?;
        Ok(LayerModel {
            name: name.to_string(),
            projector,
            gmm,
            association,
        })
    }

    /// `g = U m(normalize(project(x)))`.
    pub fn estimate(&self, x: &[f64]) -> Result<LayerEstimate> {
        let v = self.projector.corevector(x)?;
        let m = self.gmm.membership(&v)?;
        layer_estimate(&self.association, &m)
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        self.projector.write_to(archive, &self.name)?;
        self.gmm.write_to(archive, &self.name)?;
        self.association.write_to(archive, &self.name)
    }

    pub fn read_from(archive: &TensorArchive, name: &str) -> Result<Self> {
        Ok(LayerModel {
            name: name.to_string(),
            projector: Projector::read_from(archive, name)?,
            gmm: GmmModel::read_from(archive, name)?,
            association: AssociationMatrix::read_from(archive, name)?,
        })
    }
}

/// Training and validation activations with labels for one layer.
#[derive(Debug, Clone, Copy)]
pub struct TuneData<'a> {
    pub map: &'a AffineMap,
    pub train: &'a [Vec<f64>],
    pub train_labels: &'a [usize],
    pub val: &'a [Vec<f64>],
    pub val_labels: &'a [usize],
    pub n_labels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneCell {
    pub kappa: usize,
    pub clusters: usize,
    /// `None` when fitting the cell failed.
    pub top3_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_kappa: usize,
    pub best_clusters: usize,
    pub best_accuracy: f64,
    pub cells: Vec<TuneCell>,
}

impl TuneResult {
    /// `kappa,C,top3_acc,status` with one row per grid cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kappa,C,top3_acc,status\n");
        for c in &self.cells {
            match c.top3_acc {
                Some(acc) => out.push_str(&format!("{},{},{},ok\n", c.kappa, c.clusters, acc)),
                None => out.push_str(&format!("{},{},,failed\n", c.kappa, c.clusters)),
            }
        }
        out
    }
}

/// Grid search over `(kappa, C)` maximizing validation top-3 accuracy of `g`.
/// Ties prefer smaller `kappa`, then smaller `C`. Failed cells are reported
/// and skipped.
pub fn tune_layer(
    data: TuneData<'_>,
    kappa_grid: &[usize],
    cluster_grid: &[usize],
    gmm_config: &GmmConfig,
) -> Result<TuneResult> {
    if kappa_grid.is_empty() || cluster_grid.is_empty() {
        return Err(Error::invalid("tuning grids must be non-empty"));
    }
    let mut grid: Vec<(usize, usize)> = kappa_grid
        .iter()
        .flat_map(|&k| cluster_grid.iter().map(move |&c| (k, c)))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    let k = data.n_labels.min(3);

    let cells: Vec<TuneCell> = grid
        .par_iter()
        .map(|&(kappa, clusters)| {
            let run = || -> Result<f64> {
                let model = LayerModel::fit(
                    "tune",
                    data.map,
                    data.train,
                    data.train_labels,
                    data.n_labels,
                    kappa,
                    clusters,
                    gmm_config,
                )?;
                let gs = data
                    .val
                    .iter()
                    .map(|x| model.estimate(x))
                    .collect::<Result<Vec<_>>>()?;
                top_k_accuracy(&gs, data.val_labels, k)
            };
            match run() {
                Ok(acc) => TuneCell {
                    kappa,
                    clusters,
                    top3_acc: Some(acc),
                    error: None,
                },
                Err(e) => TuneCell {
                    kappa,
                    clusters,
                    top3_acc: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut best: Option<&TuneCell> = None;
    for cell in &cells {
        let Some(acc) = cell.top3_acc else { continue };
        // cells are in ascending (kappa, C) order, so strict > keeps the smallest on ties
        if best.is_none_or(|b| acc > b.top3_acc.unwrap()) {
            best = Some(cell);
        }
    }
    let best = best.ok_or_else(|| {
        let reasons: Vec<String> = cells.iter().filter_map(|c| c.error.clone()).collect();
        Error::invalid(format!("every tuning cell failed: {}", reasons.join("; ")))
    })?;
    Ok(TuneResult {
        best_kappa: best.kappa,
        best_clusters: best.clusters,
        best_accuracy: best.top3_acc.unwrap(),
        cells: cells.clone(),
    })
}
