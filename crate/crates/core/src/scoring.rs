//! Classification maps, protoclasses and the cosine confidence score.

use nalgebra::DMatrix;

use crate::association::{LayerEstimate, LayerModel};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorArchive};

pub const DEFAULT_ZETA: f64 = 0.95;

/// `L x M` matrix whose column `j` is the label estimate of layer `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMap {
    pub g: DMatrix<f64>,
}

impl ClassificationMap {
    pub fn n_labels(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_layers(&self) -> usize {
        self.g.ncols()
    }
}

pub fn build_map(estimates: &[LayerEstimate]) -> Result<ClassificationMap> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::invalid("a classification map needs at least one layer"))?;
    let l = first.0.len();
    if estimates.iter().any(|g| g.0.len() != l) {
        return Err(Error::shape("layer estimates disagree on the number of labels"));
    }
    let g = DMatrix::from_fn(l, estimates.len(), |r, c| estimates[c].0[r]);
    Ok(ClassificationMap { g })
}

/// How a protoclass was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i64)]
pub enum ProtoSource {
    /// Correct predictions with confidence above `zeta`.
    Confident = 0,
    /// No confident member: every correct prediction of the class.
    AllCorrect = 1,
    /// No correct prediction at all: uniform map.
    Uniform = 2,
}

impl ProtoSource {
    fn from_code(code: i64) -> Result<Self> {
        match code {
            0 => Ok(ProtoSource::Confident),
            1 => Ok(ProtoSource::AllCorrect),
            2 => Ok(ProtoSource::Uniform),
            _ => Err(Error::invalid(format!("unknown protoclass source code {code}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoclassSet {
    pub protos: Vec<DMatrix<f64>>,
    /// Members passing both the correctness and the confidence condition.
    pub support: Vec<usize>,
    pub source: Vec<ProtoSource>,
    pub zeta: f64,
}

impl ProtoclassSet {
    pub fn n_labels(&self) -> usize {
        self.protos.len()
    }

    pub fn get(&self, label: usize) -> Result<&DMatrix<f64>> {
        self.protos
            .get(label)
            .ok_or_else(|| Error::invalid(format!("no protoclass for label {label}")))
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        for (l, p) in self.protos.iter().enumerate() {
            archive.insert(format!("proto/{l}"), Tensor::from_matrix(p))?;
        }
        archive.insert(
            "proto/support",
            Tensor::vector_i64(self.support.iter().map(|&s| s as i64).collect()),
        )?;
        archive.insert(
            "proto/source",
            Tensor::vector_i64(self.source.iter().map(|&s| s as i64).collect()),
        )?;
        archive.insert("proto/zeta", Tensor::scalar_f64(self.zeta))?;
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive) -> Result<Self> {
        let support: Vec<usize> = archive
            .require("proto/support")?
            .to_i64_vec()?
            .into_iter()
            .map(|s| s.max(0) as usize)
            .collect();
        let source = match archive.get("proto/source") {
            Some(t) => t
                .to_i64_vec()?
                .into_iter()
                .map(ProtoSource::from_code)
                .collect::<Result<Vec<_>>>()?,
            None => vec![ProtoSource::Confident; support.len()],
        };
        let protos = (0..support.len())
            .map(|l| archive.require(&format!("proto/{l}"))?.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        let zeta = archive.require("proto/zeta")?.to_scalar_f64()?;
        if source.len() != support.len() {
            return Err(Error::shape("proto/source and proto/support differ in length"));
        }
        Ok(ProtoclassSet {
            protos,
            support,
            source,
            zeta,
        })
    }
}

fn normalize_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
    m
}

/// Per-class references from maps of correct, confident training samples.
///
/// `P^l` is the column-normalized sum of the maps with
/// `prediction == label == l` and `max softmax > zeta`. Classes with no such
/// map fall back to all correct maps of the class, then to the uniform map.
pub fn fit_protoclasses(
    maps: &[ClassificationMap],
    predictions: &[usize],
    labels: &[usize],
    softmax_max: &[f64],
    zeta: f64,
) -> Result<ProtoclassSet> {
    let n = maps.len();
    if predictions.len() != n || labels.len() != n || softmax_max.len() != n {
        return Err(Error::shape("maps, predictions, labels and confidences must align"));
    }
    if !(0.0..1.0).contains(&zeta) {
        return Err(Error::invalid(format!("zeta = {zeta} outside [0, 1)")));
    }
    let first = maps.first().ok_or_else(|| Error::invalid("no maps to build protoclasses from"))?;
    let (n_labels, n_layers) = first.g.shape();
    if maps.iter().any(|m| m.g.shape() != (n_labels, n_layers)) {
        return Err(Error::shape("classification maps differ in shape"));
    }

    let mut confident = vec![DMatrix::zeros(n_labels, n_layers); n_labels];
    let mut correct = vec![DMatrix::zeros(n_labels, n_layers); n_labels];
    let mut support = vec![0usize; n_labels];
    let mut n_correct = vec![0usize; n_labels];
    for t in 0..n {
        let l = labels[t];
        if l >= n_labels {
            return Err(Error::invalid(format!("label {l} of sample {t} out of range")));
        }
        if predictions[t] != l {
            continue;
        }
        correct[l] += &maps[t].g;
        n_correct[l] += 1;
        if softmax_max[t] > zeta {
            confident[l] += &maps[t].g;
            support[l] += 1;
        }
    }

    let mut protos = Vec::with_capacity(n_labels);
    let mut source = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        if support[l] > 0 {
            protos.push(normalize_columns(std::mem::replace(&mut confident[l], DMatrix::zeros(0, 0))));
            source.push(ProtoSource::Confident);
        } else if n_correct[l] > 0 {
            protos.push(normalize_columns(std::mem::replace(&mut correct[l], DMatrix::zeros(0, 0))));
            source.push(ProtoSource::AllCorrect);
        } else {
            protos.push(DMatrix::from_element(n_labels, n_layers, 1.0 / n_labels as f64));
            source.push(ProtoSource::Uniform);
        }
    }
    Ok(ProtoclassSet {
        protos,
        support,
        source,
        zeta,
    })
}

/// Cosine similarity `<P, G>_F / (|P|_F |G|_F)`, in `[0, 1]` for
/// non-negative inputs.
pub fn score(map: &ClassificationMap, proto: &DMatrix<f64>) -> Result<f64> {
    if map.g.shape() != proto.shape() {
        return Err(Error::shape(format!(
            "map is {:?}, protoclass is {:?}",
            map.g.shape(),
            proto.shape()
        )));
    }
    let denom = map.g.norm() * proto.norm();
    if denom <= 0.0 {
        return Err(Error::numerical("zero classification map or protoclass"));
    }
    Ok((map.g.dot(proto) / denom).clamp(0.0, 1.0))
}

/// Fitted layers plus protoclasses: everything needed at inference time.
#[derive(Debug, Clone)]
pub struct AideModel {
    pub layers: Vec<LayerModel>,
    pub protos: ProtoclassSet,
}

impl AideModel {
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// `activations[j]` is the input of layer `j`.
    pub fn classification_map(&self, activations: &[&[f64]]) -> Result<ClassificationMap> {
        if activations.len() != self.layers.len() {
            return Err(Error::missing(format!(
                "{} activation vectors for {} analyzed layers",
                activations.len(),
                self.layers.len()
            )));
        }
        let gs = self
            .layers
            .iter()
            .zip(activations)
            .map(|(layer, x)| layer.estimate(x).map_err(|e| e.in_stage(&layer.name, "estimate")))
            .collect::<Result<Vec<_>>>()?;
        build_map(&gs)
    }

    /// Score of one sample against the protoclass of its predicted label.
    pub fn score_sample(&self, activations: &[&[f64]], prediction: usize) -> Result<f64> {
        let map = self.classification_map(activations)?;
        score(&map, self.protos.get(prediction)?)
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        for layer in &self.layers {
            layer.write_to(archive)?;
        }
        self.protos.write_to(archive)
    }

    pub fn read_from(archive: &TensorArchive, layer_names: &[String]) -> Result<Self> {
        let layers = layer_names
            .iter()
            .map(|name| LayerModel::read_from(archive, name).map_err(|e| e.in_stage(name, "load")))
            .collect::<Result<Vec<_>>>()?;
        Ok(AideModel {
            layers,
            protos: ProtoclassSet::read_from(archive)?,
        })
    }
}

/// One scored sample. Baseline columns are `None` when not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub prediction: usize,
    pub true_label: Option<usize>,
    pub msp: f64,
    pub score: f64,
    pub tag: String,
    pub doctor: Option<f64>,
    pub dmd: Option<f64>,
    pub fs: Option<f64>,
}

impl ScoreRow {
    pub fn is_correct(&self) -> bool {
        self.true_label == Some(self.prediction)
    }

    /// Value of a named score column (`score`, `msp`, `doctor`, `dmd`, `fs`).
    pub fn detector(&self, name: &str) -> Option<f64> {
        match name {
            "score" => Some(self.score),
            "msp" => Some(self.msp),
            "doctor" => self.doctor,
            "dmd" => self.dmd,
            "fs" => self.fs,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

pub const SCORE_CSV_HEADER: &str = "sample_id,prediction,true_label,msp,score,tag,doctor,dmd,fs";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl ScoreReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCORE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.sample_id,
                r.prediction,
                opt(&r.true_label),
                r.msp,
                r.score,
                r.tag,
                opt(&r.doctor),
                opt(&r.dmd),
                opt(&r.fs)
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != SCORE_CSV_HEADER {
            return Err(Error::invalid(format!("unexpected score CSV header `{header}`")));
        }
        let parse_f = |s: &str, line: usize| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("line {line}: `{s}` is not a number")))
        };
        let parse_u = |s: &str, line: usize| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("line {line}: `{s}` is not an index")))
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::invalid(format!("line {no}: expected 9 fields, found {}", f.len())));
            }
            let optf = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse_f(s, no).map(Some)
                }
            };
            rows.push(ScoreRow {
                sample_id: parse_u(f[0], no)?,
                prediction: parse_u(f[1], no)?,
                true_label: if f[2].is_empty() { None } else { Some(parse_u(f[2], no)?) },
                msp: parse_f(f[3], no)?,
                score: parse_f(f[4], no)?,
                tag: f[5].to_string(),
                doctor: optf(f[6])?,
                dmd: optf(f[7])?,
                fs: optf(f[8])?,
            });
        }
        Ok(ScoreReport { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn map(rows: usize, cols: usize, data: &[f64]) -> ClassificationMap {
        ClassificationMap {
            g: DMatrix::from_row_slice(rows, cols, data),
        }
    }

    #[test]
    fn build_map_columns() {
        let g0 = LayerEstimate(DVector::from_vec(vec![0.2, 0.8]));
        let g1 = LayerEstimate(DVector::from_vec(vec![0.6, 0.4]));
        let m = build_map(std::slice::from_ref(&g0)).unwrap();
        assert_eq!(m.g, DMatrix::from_column_slice(2, 1, &[0.2, 0.8]));
        let ab = build_map(&[g0.clone(), g1.clone()]).unwrap();
        let ba = build_map(&[g1, g0]).unwrap();
        assert_eq!(ab.g.column(0), ba.g.column(1));
        assert_eq!(ab.g.column(1), ba.g.column(0));
        assert!(build_map(&[]).is_err());
        let bad = LayerEstimate(DVector::from_vec(vec![1.0]));
        assert!(build_map(&[ab_col(&ab), bad]).is_err());
    }

    fn ab_col(m: &ClassificationMap) -> LayerEstimate {
        LayerEstimate(m.g.column(0).clone_owned())
    }

    #[test]
    fn score_cases() {
        let g = map(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        assert!((score(&g, &g.g).unwrap() - 1.0).abs() < 1e-15);
        let p = DMatrix::from_element(2, 2, 0.5);
        assert!((score(&g, &p).unwrap() - 1.0 / 1.5f64.sqrt()).abs() < 1e-15);
        let e0 = map(2, 1, &[1.0, 0.0]);
        assert_eq!(score(&e0, &DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap(), 0.0);
        assert!(score(&e0, &p).is_err());
    }

    #[test]
    fn single_member_protoclass_equals_member() {
        let a = map(2, 1, &[0.9, 0.1]);
        let b = map(2, 1, &[0.3, 0.7]);
        let p = fit_protoclasses(&[a.clone(), b.clone()], &[0, 1], &[0, 1], &[0.99, 0.99], 0.95).unwrap();
        assert!((&p.protos[0] - &a.g).amax() < 1e-15);
        assert!((&p.protos[1] - &b.g).amax() < 1e-15);
        assert_eq!(p.support, vec![1, 1]);
    }

    #[test]
    fn identical_members_are_idempotent() {
        let a = map(2, 1, &[0.9, 0.1]);
        let p = fit_protoclasses(&[a.clone(), a.clone()], &[0, 0], &[0, 0], &[0.99, 0.98], 0.5).unwrap();
        assert!((&p.protos[0] - &a.g).amax() < 1e-15);
    }

    #[test]
    fn sum_then_normalize_equals_mean() {
        let maps = [
            map(2, 2, &[0.9, 0.2, 0.1, 0.8]),
            map(2, 2, &[0.6, 0.5, 0.4, 0.5]),
            map(2, 2, &[0.75, 0.1, 0.25, 0.9]),
        ];
        let p = fit_protoclasses(&maps, &[1, 1, 1], &[1, 1, 1], &[1.0, 1.0, 1.0], 0.0).unwrap();
        let mut sum = DMatrix::zeros(2, 2);
        for m in &maps {
            sum += &m.g;
        }
        let mean = &sum / 3.0;
        let mut normalized = sum.clone();
        for c in 0..2 {
            let s = sum.column(c).sum();
            normalized.column_mut(c).unscale_mut(s);
        }
        assert!((&p.protos[1] - &mean).amax() < 1e-15);
        assert!((&p.protos[1] - &normalized).amax() < 1e-15);
    }

    #[test]
    fn fallbacks() {
        let a = map(3, 1, &[0.7, 0.2, 0.1]);
        let b = map(3, 1, &[0.1, 0.6, 0.3]);
        // class 0: correct but not confident; class 1: wrong prediction; class 2: unseen
        let p = fit_protoclasses(&[a.clone(), b], &[0, 2], &[0, 1], &[0.6, 0.99], 0.95).unwrap();
        assert_eq!(p.source, vec![ProtoSource::AllCorrect, ProtoSource::Uniform, ProtoSource::Uniform]);
        assert_eq!(p.support, vec![0, 0, 0]);
        assert!((&p.protos[0] - &a.g).amax() < 1e-15);
        assert!(p.protos[1].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = score(&a, &p.protos[2]).unwrap();
        assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn zeta_outside_range_is_rejected() {
        let a = map(2, 1, &[0.5, 0.5]);
        assert!(fit_protoclasses(&[a], &[0], &[0], &[0.9], 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let report = ScoreReport {
            rows: vec![
                ScoreRow {
                    sample_id: 0,
                    prediction: 2,
                    true_label: Some(2),
                    msp: 0.75,
                    score: 0.125,
                    tag: "id".into(),
                    doctor: Some(0.5),
                    dmd: None,
                    fs: Some(1.0),
                },
                ScoreRow {
                    sample_id: 1,
                    prediction: 0,
                    true_label: None,
                    msp: 0.3,
                    score: 0.9,
                    tag: "ood".into(),
                    doctor: None,
                    dmd: None,
                    fs: None,
                },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("sample_id,prediction,true_label,msp,score,tag,doctor,dmd,fs\n"));
        assert!(csv.contains("\n1,0,,0.3,0.9,ood,,,\n"));
        assert_eq!(ScoreReport::from_csv(&csv).unwrap(), report);
    }

    #[test]
    fn proto_archive_round_trip() {
        let a = map(2, 1, &[0.9, 0.1]);
        let p = fit_protoclasses(&[a], &[0], &[0], &[0.99], 0.95).unwrap();
        let mut ar = TensorArchive::new();
        p.write_to(&mut ar).unwrap();
        assert_eq!(ProtoclassSet::read_from(&ar).unwrap(), p);
    }
}
