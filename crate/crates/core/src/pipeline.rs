//! Batch drivers behind the command line and the examples: JSON
//! configuration, stage seeding, manifests and one function per command.
//!
//! Every driver is a pure function of its configuration, its input archives
//! and the master seed. Per-layer and per-sample work runs on the current
//! rayon pool and is collected in input order, so results do not depend on
//! the number of workers.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affine::{toeplitz_unroll, AffineMap, ConvSpec};
use crate::association::{tune_layer, LayerModel, TuneData, TuneResult};
use crate::baselines::{doctor_score, dmd_score, fit_dmd, fs_score, msp, MahalanobisModel, SqueezeConfig};
use crate::error::{Error, Result};
use crate::gmm::{argmax, GmmConfig};
use crate::metrics::{
    auc, detection_metrics, fpr_star, metrics_json, reliability_bins, reliability_csv, unified_threshold_eval,
    DetectionMetrics, ReliabilityBin, UnifiedThreshold,
};
use crate::refnet::attacks::{run_attack, AttackConfig, AttackOutcome};
use crate::refnet::synth::{corrupt, gen_blobs, gen_ood, Dataset, SynthSpec};
use crate::refnet::{softmax, CnnNet, MlpNet, Network, SgdConfig, TrainReport};
use crate::rng::SeededRng;
use crate::scoring::{build_map, fit_protoclasses, AideModel, ScoreReport, ScoreRow, DEFAULT_ZETA};
use crate::tensor::{Tensor, TensorArchive};

/// Prefix of the reference network inside weight and model archives.
pub const NET_PREFIX: &str = "net";

/// Stream labels for [`stage_seed`].
pub mod stage {
    pub const SYNTH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SGD: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const CORRUPT: u64 = 5;
    /// Layer `j` uses `GMM + j`.
    pub const GMM: u64 = 100;
}

/// Seed of one pipeline stage, derived from the master seed.
pub fn stage_seed(master: u64, stage: u64) -> u64 {
    SeededRng::derived(master, stage).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kappa: usize,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_labels: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Within-class standard deviation.
    pub sigma: f64,
    /// Class means are uniform in this box.
    pub mean_range: (f64, f64),
    /// Per-coordinate OOD displacement of every class mean, in units of `sigma`.
    pub ood_shift: f64,
    /// Noise scale per corruption intensity.
    pub corruption_sigma: f64,
    pub intensities: u32,
    /// Range every generated sample is clamped to, if any.
    pub clip: Option<(f64, f64)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_labels: 8,
            dim: 32,
            n_train: 4000,
            n_val: 1000,
            n_test: 1000,
            sigma: 0.1,
            mean_range: (0.4, 0.6),
            ood_shift: 10.0,
            corruption_sigma: 0.05,
            intensities: 5,
            clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefnetConfig {
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
}

impl Default for RefnetConfig {
    fn default() -> Self {
        RefnetConfig {
            hidden: vec![64, 64],
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub kappa_grid: Vec<usize>,
    pub cluster_grid: Vec<usize>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            kappa_grid: vec![2, 4, 8, 16],
            cluster_grid: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub doctor_temperature: f64,
    pub dmd: bool,
    pub dmd_reg: f64,
    /// Layer whose input feeds the Mahalanobis detector; defaults to the
    /// input of the last network layer.
    pub dmd_layer: Option<String>,
    /// `None` disables feature squeezing.
    pub squeeze: Option<SqueezeConfig>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            doctor_temperature: 1.0,
            dmd: true,
            dmd_reg: 1e-6,
            dmd_layer: None,
            squeeze: Some(SqueezeConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    /// Tag of the in-distribution test rows.
    pub id_tag: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bins: 10,
            id_tag: "id".into(),
        }
    }
}

/// The single JSON document that drives every command. Nested `seed` fields
/// are overwritten from `seed` by [`PipelineConfig::resolve_seeds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    pub zeta: f64,
    pub gmm: GmmConfig,
    pub tune: TuneConfig,
    pub attack: AttackConfig,
    pub synth: SynthConfig,
    pub refnet: RefnetConfig,
    pub baselines: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let layers = (0..3)
            .map(|i| LayerSpec {
                name: format!("{NET_PREFIX}/layer{i}"),
                kappa: 8,
                clusters: 16,
            })
            .collect();
        let mut cfg = PipelineConfig {
            seed: 0,
            layers,
            zeta: DEFAULT_ZETA,
            gmm: GmmConfig::default(),
            tune: TuneConfig::default(),
            attack: AttackConfig::default(),
            synth: SynthConfig::default(),
            refnet: RefnetConfig::default(),
            baselines: BaselineConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.resolve_seeds();
        cfg
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse configuration: {e}")))?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PipelineConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Replaces the master seed and everything derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve_seeds();
        self
    }

    /// Fills the nested seed fields from the master seed.
    pub fn resolve_seeds(&mut self) {
        self.refnet.sgd.seed = stage_seed(self.seed, stage::SGD);
        self.attack.seed = stage_seed(self.seed, stage::ATTACK);
        self.gmm.seed = stage_seed(self.seed, stage::GMM);
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("at least one layer must be analyzed".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kappa == 0 || l.clusters == 0 {
                return Err(Error::Config(format!("layer `{}` needs kappa, C >= 1", l.name)));
            }
            if self.layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Config(format!("layer `{}` listed twice", l.name)));
            }
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("zeta = {} outside [0, 1)", self.zeta)));
        }
        if self.eval.bins == 0 {
            return Err(Error::Config("eval.bins must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("configuration serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Configured layer names, in order.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    fn gmm_for_layer(&self, j: usize) -> GmmConfig {
        GmmConfig {
            seed: stage_seed(self.seed, stage::GMM + j as u64),
            ..self.gmm
        }
    }

    /// Every derived seed, by stage name.
    pub fn seeds(&self) -> IndexMap<String, u64> {
        let mut s = IndexMap::new();
        s.insert("master".to_string(), self.seed);
        s.insert("synth".to_string(), stage_seed(self.seed, stage::SYNTH));
        s.insert("init".to_string(), stage_seed(self.seed, stage::INIT));
        s.insert("sgd".to_string(), self.refnet.sgd.seed);
        s.insert("attack".to_string(), self.attack.seed);
        s.insert("corrupt".to_string(), stage_seed(self.seed, stage::CORRUPT));
        for (j, l) in self.layers.iter().enumerate() {
            s.insert(format!("gmm:{}", l.name), self.gmm_for_layer(j).seed);
        }
        s
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    seeds: IndexMap<String, u64>,
}

/// The `manifest` entry: UTF-8 JSON naming the tool, command, config hash and seeds.
pub fn manifest_tensor(command: &str, cfg: &PipelineConfig) -> Tensor {
    let m = Manifest {
        tool: "mlcs",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: cfg.hash(),
        seeds: cfg.seeds(),
    };
    Tensor::text(&serde_json::to_string(&m).expect("manifest serializes"))
}

fn with_manifest(command: &str, cfg: &PipelineConfig, body: impl FnOnce(&mut TensorArchive) -> Result<()>) -> Result<TensorArchive> {
    let mut a = TensorArchive::new();
    a.insert("manifest", manifest_tensor(command, cfg))?;
    body(&mut a)?;
    Ok(a)
}

/// A reference network stored under [`NET_PREFIX`].
#[derive(Debug, Clone, PartialEq)]
pub enum RefNet {
    Mlp(MlpNet),
    Cnn(CnnNet),
}

impl RefNet {
    pub fn read_from(archive: &TensorArchive) -> Result<Self> {
        let kind = archive.require(&format!("{NET_PREFIX}/kind"))?.to_text()?;
        match kind.as_str() {
            "mlp" => Ok(RefNet::Mlp(MlpNet::read_from(archive, NET_PREFIX)?)),
            "cnn" => Ok(RefNet::Cnn(CnnNet::read_from(archive, NET_PREFIX)?)),
            other => Err(Error::invalid(format!("unknown network kind `{other}`"))),
        }
    }

    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        match self {
            RefNet::Mlp(n) => n.write_to(archive, NET_PREFIX),
            RefNet::Cnn(n) => n.write_to(archive, NET_PREFIX),
        }
    }

    pub fn as_mlp(&self) -> Result<&MlpNet> {
        match self {
            RefNet::Mlp(n) => Ok(n),
            RefNet::Cnn(_) => Err(Error::invalid("gradient attacks need a dense network")),
        }
    }

    fn inner(&self) -> &dyn Network {
        match self {
            RefNet::Mlp(n) => n,
            RefNet::Cnn(n) => n,
        }
    }
}

impl Network for RefNet {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn n_labels(&self) -> usize {
        self.inner().n_labels()
    }

    fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.inner().logits(x)
    }

    fn layer_maps(&self, prefix: &str) -> Result<Vec<(String, AffineMap)>> {
        self.inner().layer_maps(prefix)
    }

    fn layer_inputs(&self, x: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.inner().layer_inputs(x)
    }
}

/// Where layer operators come from: a reference network, or a weights
/// archive exported from elsewhere (`<layer>/W`, `<layer>/b` or
/// `<layer>/kernels`, `<layer>/bias`, `<layer>/conv_meta`).
#[derive(Debug, Clone)]
pub enum Subject {
    Net(RefNet),
    Exported(TensorArchive),
}

impl Subject {
    pub fn from_archive(archive: TensorArchive) -> Result<Self> {
        if archive.contains(&format!("{NET_PREFIX}/kind")) {
            Ok(Subject::Net(RefNet::read_from(&archive)?))
        } else {
            Ok(Subject::Exported(archive))
        }
    }

    pub fn net(&self) -> Option<&RefNet> {
        match self {
            Subject::Net(n) => Some(n),
            Subject::Exported(_) => None,
        }
    }

    /// The operator of every requested layer, in request order.
    pub fn layer_maps(&self, names: &[String]) -> Result<Vec<AffineMap>> {
        match self {
            Subject::Net(net) => {
                let all = net.layer_maps(NET_PREFIX)?;
                names
                    .iter()
                    .map(|n| {
                        all.iter().find(|(k, _)| k == n).map(|(_, m)| m.clone()).ok_or_else(|| {
                            let known: Vec<&str> = all.iter().map(|(k, _)| k.as_str()).collect();
                            Error::missing(format!("layer `{n}` not in network (available: {})", known.join(", ")))
                        })
                    })
                    .collect()
            }
            Subject::Exported(a) => names
                .iter()
                .map(|n| {
                    if a.contains(&format!("{n}/W")) {
                        AffineMap::read_from(a, n)
                    } else if a.contains(&format!("{n}/conv_meta")) {
                        toeplitz_unroll(&ConvSpec::read_from(a, n)?)
                    } else {
                        Err(Error::missing(format!("layer `{n}` not in weights archive")))
                    }
                })
                .collect(),
        }
    }
}

/// Network outputs and analyzed-layer inputs for one dataset.
#[derive(Debug, Clone, Default)]
pub struct Observations {
    pub tag: String,
    pub labels: Option<Vec<usize>>,
    pub logits: Vec<DVector<f64>>,
    pub probs: Vec<DVector<f64>>,
    pub preds: Vec<usize>,
    /// `activations[j][t]`: input of analyzed layer `j` for sample `t`.
    pub activations: Vec<Vec<Vec<f64>>>,
    pub pre_logits: Option<Vec<Vec<f64>>>,
    /// Raw samples; present when a network is available.
    pub inputs: Option<Vec<Vec<f64>>>,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    fn empty(n_layers: usize, tag: String) -> Self {
        Observations {
            tag,
            activations: vec![Vec::new(); n_layers],
            ..Default::default()
        }
    }

    /// Runs `net` over `data` and keeps the inputs of `layers`.
    pub fn from_network(net: &RefNet, data: &Dataset, layers: &[String], dmd_layer: Option<&str>) -> Result<Self> {
        let names: Vec<String> = net.layer_maps(NET_PREFIX)?.into_iter().map(|(n, _)| n).collect();
        let index = |want: &str| {
            names
                .iter()
                .position(|n| n == want)
                .ok_or_else(|| Error::missing(format!("layer `{want}` not in network (available: {})", names.join(", "))))
        };
        let picked = layers.iter().map(|l| index(l)).collect::<Result<Vec<_>>>()?;
        let dmd_index = match dmd_layer {
            Some(l) => index(l)?,
            None => names.len() - 1,
        };
        let per_sample = data
            .x
            .par_iter()
            .map(|x| -> Result<(DVector<f64>, Vec<DVector<f64>>)> { Ok((net.logits(x)?, net.layer_inputs(x)?)) })
            .collect::<Result<Vec<_>>>()?;
        let mut obs = Observations::empty(layers.len(), data.tag.clone());
        obs.labels = data.labels.clone();
        let mut pre = Vec::with_capacity(data.len());
        for (logits, inputs) in per_sample {
            let z = softmax(&logits);
            obs.preds.push(argmax(z.as_slice()));
            obs.probs.push(z);
            obs.logits.push(logits);
            for (slot, &j) in obs.activations.iter_mut().zip(&picked) {
                slot.push(inputs[j].as_slice().to_vec());
            }
            pre.push(inputs[dmd_index].as_slice().to_vec());
        }
        obs.pre_logits = Some(pre);
        obs.inputs = Some(data.x.clone());
        Ok(obs)
    }

    /// Reads exported activations: one `N x n` tensor per layer name plus
    /// `z` (softmax), and optionally `pred`, `label` and `data/tag`. Logits
    /// are taken as `ln z`.
    pub fn from_exported(archive: &TensorArchive, layers: &[String], dmd_layer: Option<&str>) -> Result<Self> {
        let tag = match archive.get("data/tag") {
            Some(t) => t.to_text()?,
            None => "id".to_string(),
        };
        let Some(z) = archive.get("z") else {
            return Ok(Observations::empty(layers.len(), tag));
        };
        let rows = |t: &Tensor, name: &str| -> Result<Vec<Vec<f64>>> {
            if t.rank() != 2 {
                return Err(Error::shape(format!("`{name}` must be rank 2")));
            }
            let d = t.shape()[1].max(1);
            Ok(t.to_f64_vec().chunks(d).map(<[f64]>::to_vec).collect())
        };
        let probs: Vec<DVector<f64>> = rows(z, "z")?.into_iter().map(DVector::from_vec).collect();
        let n = probs.len();
        let indices = |name: &str| -> Result<Option<Vec<usize>>> {
            match archive.get(name) {
                None => Ok(None),
                Some(t) => {
                    let v = t
                        .to_i64_vec()?
                        .into_iter()
                        .map(|v| usize::try_from(v).map_err(|_| Error::invalid(format!("negative value in `{name}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    if v.len() != n {
                        return Err(Error::shape(format!("`{name}` has {} entries for {n} samples", v.len())));
                    }
                    Ok(Some(v))
                }
            }
        };
        let preds = indices("pred")?.unwrap_or_else(|| probs.iter().map(|p| argmax(p.as_slice())).collect());
        let labels = indices("label")?;
        let mut activations = Vec::with_capacity(layers.len());
        for l in layers {
            let a = rows(archive.require(l)?, l)?;
            if a.len() != n {
                return Err(Error::shape(format!("`{l}` has {} rows for {n} samples", a.len())));
            }
            activations.push(a);
        }
        let pre_logits = match dmd_layer {
            Some(l) => Some(rows(archive.require(l)?, l)?),
            None => None,
        };
        Ok(Observations {
            tag,
            labels,
            logits: probs.iter().map(|p| p.map(|v| v.max(f64::MIN_POSITIVE).ln())).collect(),
            probs,
            preds,
            activations,
            pre_logits,
            inputs: None,
        })
    }

    /// Observations of `data_archive` for the given subject.
    pub fn collect(subject: &Subject, data_archive: &TensorArchive, cfg: &PipelineConfig) -> Result<Self> {
        let layers = cfg.layer_names();
        let dmd_layer = cfg.baselines.dmd_layer.as_deref();
        match subject {
            Subject::Net(net) => {
                if !data_archive.contains("data/x") {
                    let tag = match data_archive.get("data/tag") {
                        Some(t) => t.to_text()?,
                        None => String::new(),
                    };
                    return Ok(Observations::empty(layers.len(), tag));
                }
                Observations::from_network(net, &Dataset::read_from(data_archive)?, &layers, dmd_layer)
            }
            Subject::Exported(_) => Observations::from_exported(data_archive, &layers, dmd_layer),
        }
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::missing(format!("dataset `{}` has no labels", self.tag)))
    }

    fn sample_activations(&self, t: usize) -> Vec<&[f64]> {
        self.activations.iter().map(|layer| layer[t].as_slice()).collect()
    }
}

/// Everything `score` needs, as stored in a model archive.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub config: PipelineConfig,
    pub net: Option<RefNet>,
    pub aide: AideModel,
    pub dmd: Option<MahalanobisModel>,
}

impl FittedModel {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        with_manifest("fit", &self.config, |a| {
            a.insert("model/config", Tensor::text(&self.config.to_json()))?;
            if let Some(net) = &self.net {
                net.write_to(a)?;
            }
            self.aide.write_to(a)?;
            if let Some(d) = &self.dmd {
                d.write_to(a, "dmd")?;
            }
            Ok(())
        })
    }

    pub fn read_from(archive: &TensorArchive) -> Result<Self> {
        let config = PipelineConfig::from_json(&archive.require("model/config")?.to_text()?)?;
        let net = if archive.contains(&format!("{NET_PREFIX}/kind")) {
            Some(RefNet::read_from(archive)?)
        } else {
            None
        };
        let aide = AideModel::read_from(archive, &config.layer_names())?;
        let dmd = if archive.contains("dmd/cov") {
            Some(MahalanobisModel::read_from(archive, "dmd")?)
        } else {
            None
        };
        Ok(FittedModel { config, net, aide, dmd })
    }

    /// The subject used to observe new data with this model.
    pub fn subject(&self) -> Subject {
        match &self.net {
            Some(n) => Subject::Net(n.clone()),
            None => Subject::Exported(TensorArchive::new()),
        }
    }
}

/// Fits every configured layer on `train`, the protoclasses on the training
/// maps, and the Mahalanobis detector (calibrated on `val`).
pub fn fit(cfg: &PipelineConfig, subject: &Subject, train: &Observations, val: &Observations) -> Result<FittedModel> {
    cfg.validate()?;
    let names = cfg.layer_names();
    let maps = subject.layer_maps(&names)?;
    let labels = train.require_labels()?;
    let n_labels = train
        .probs
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let layers = cfg
        .layers
        .par_iter()
        .enumerate()
        .map(|(j, spec)| {
            log::info!("fitting layer `{}` (kappa {}, C {})", spec.name, spec.kappa, spec.clusters);
            LayerModel::fit(
                &spec.name,
                &maps[j],
                &train.activations[j],
                labels,
                n_labels,
                spec.kappa,
                spec.clusters,
                &cfg.gmm_for_layer(j),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let train_maps = (0..train.len())
        .into_par_iter()
        .map(|t| {
            let gs = layers
                .iter()
                .zip(train.sample_activations(t))
                .map(|(l, x)| l.estimate(x).map_err(|e| e.in_stage(&l.name, "estimate")))
                .collect::<Result<Vec<_>>>()?;
            build_map(&gs)
        })
        .collect::<Result<Vec<_>>>()?;
    let msps: Vec<f64> = train.probs.iter().map(|p| p.max()).collect();
    let protos = fit_protoclasses(&train_maps, &train.preds, labels, &msps, cfg.zeta)
        .map_err(|e| e.in_stage("*", "protoclasses"))?;
    for (l, (&s, src)) in protos.support.iter().zip(&protos.source).enumerate() {
        log::debug!("protoclass {l}: {s} confident maps ({src:?})");
    }

    let dmd = match (&train.pre_logits, cfg.baselines.dmd) {
        (Some(features), true) => {
            let mut m = fit_dmd(features, labels, n_labels, cfg.baselines.dmd_reg).map_err(|e| e.in_stage("dmd", "fit"))?;
            match &val.pre_logits {
                Some(v) if !v.is_empty() => m.calibrate(v)?,
                _ => m.calibrate(features)?,
            }
            Some(m)
        }
        _ => None,
    };
    Ok(FittedModel {
        config: cfg.clone(),
        net: subject.net().cloned(),
        aide: AideModel { layers, protos },
        dmd,
    })
}

/// One row per sample: AIDE score plus every configured baseline.
pub fn score(model: &FittedModel, obs: &Observations) -> Result<Vec<ScoreRow>> {
    let b = &model.config.baselines;
    (0..obs.len())
        .into_par_iter()
        .map(|t| {
            let pred = obs.preds[t];
            let s = model.aide.score_sample(&obs.sample_activations(t), pred)?;
            let dmd = match (&model.dmd, &obs.pre_logits) {
                (Some(m), Some(f)) => Some(dmd_score(m, &f[t])?),
                _ => None,
            };
            let fs = match (&model.net, &b.squeeze, &obs.inputs) {
                (Some(net), Some(sq), Some(x)) => Some(fs_score(net, &x[t], sq)?),
                _ => None,
            };
            Ok(ScoreRow {
                sample_id: t,
                prediction: pred,
                true_label: obs.labels.as_ref().map(|l| l[t]),
                msp: msp(obs.probs[t].as_slice())?,
                score: s,
                tag: obs.tag.clone(),
                doctor: Some(doctor_score(obs.logits[t].as_slice(), b.doctor_temperature)?),
                dmd,
                fs,
            })
        })
        .collect()
}

/// Detector columns in CSV order.
pub const DETECTORS: [&str; 5] = ["score", "msp", "doctor", "dmd", "fs"];

/// Outputs of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Keyed `<detector>/<case>`; cases are `misclassification` and every
    /// non-ID tag in order of appearance.
    pub metrics: IndexMap<String, DetectionMetrics>,
    /// AIDE score over the ID rows.
    pub reliability: Vec<ReliabilityBin>,
    /// Per detector, the ID-derived threshold applied to every non-ID tag.
    pub unified: IndexMap<String, UnifiedThreshold>,
}

impl Evaluation {
    pub fn get(&self, detector: &str, case: &str) -> Option<&DetectionMetrics> {
        self.metrics.get(&format!("{detector}/{case}"))
    }

    pub fn metrics_json(&self) -> Result<String> {
        metrics_json(&self.metrics)
    }

    pub fn reliability_csv(&self) -> String {
        reliability_csv(&self.reliability)
    }

    /// `detector,case,fpr` with `mean` and `max` rows per detector.
    pub fn unified_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("detector,case,fpr\n");
        for (det, u) in &self.unified {
            for (case, v) in &u.fpr {
                out.push_str(&format!("{det},{case},{}\n", o(*v)));
            }
            out.push_str(&format!("{det},mean,{}\n{det},max,{}\n", o(u.mean), o(u.max)));
        }
        out
    }

    /// Writes `metrics.json`, `reliability.csv` and `unified.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), self.metrics_json()?)?;
        fs::write(dir.join("reliability.csv"), self.reliability_csv())?;
        fs::write(dir.join("unified.csv"), self.unified_csv())?;
        Ok(())
    }
}

fn column(rows: &[&ScoreRow], detector: &str) -> Option<Vec<f64>> {
    rows.iter().map(|r| r.detector(detector)).collect()
}

/// AUC and FPR* per detector and case. Misclassification compares correct
/// against wrong ID rows; every other tag is compared against all ID rows,
/// with the FPR* threshold always taken from the correct ID rows.
pub fn evaluate(rows: &[ScoreRow], cfg: &EvalConfig) -> Result<Evaluation> {
    let id: Vec<&ScoreRow> = rows.iter().filter(|r| r.tag == cfg.id_tag).collect();
    if id.is_empty() {
        return Err(Error::invalid(format!("no rows tagged `{}`", cfg.id_tag)));
    }
    if id.iter().any(|r| r.true_label.is_none()) {
        return Err(Error::invalid("ID rows need true labels"));
    }
    let correct: Vec<&ScoreRow> = id.iter().copied().filter(|r| r.is_correct()).collect();
    let wrong: Vec<&ScoreRow> = id.iter().copied().filter(|r| !r.is_correct()).collect();
    let mut tags: Vec<&str> = Vec::new();
    for r in rows {
        if r.tag != cfg.id_tag && !tags.contains(&r.tag.as_str()) {
            tags.push(&r.tag);
        }
    }

    let mut metrics = IndexMap::new();
    let mut unified = IndexMap::new();
    for det in DETECTORS {
        let (Some(id_all), Some(id_ok)) = (column(&id, det), column(&correct, det)) else {
            continue;
        };
        if id_ok.is_empty() {
            return Err(Error::invalid("no correctly classified ID rows"));
        }
        if let Some(neg) = column(&wrong, det).filter(|n| !n.is_empty()) {
            metrics.insert(format!("{det}/misclassification"), detection_metrics(&id_ok, &neg)?);
        }
        let mut cases = Vec::new();
        for &tag in &tags {
            let members: Vec<&ScoreRow> = rows.iter().filter(|r| r.tag == tag).collect();
            let Some(neg) = column(&members, det) else {
                continue;
            };
            let (fpr, tau) = fpr_star(&id_ok, &neg)?;
            metrics.insert(
                format!("{det}/{tag}"),
                DetectionMetrics {
                    auc: auc(&id_all, &neg)?,
                    fpr_star: fpr,
                    threshold: tau,
                    n_pos: id_all.len(),
                    n_neg: neg.len(),
                },
            );
            cases.push((tag.to_string(), neg));
        }
        unified.insert(det.to_string(), unified_threshold_eval(&id_ok, &cases)?);
    }

    let scores: Vec<f64> = id.iter().map(|r| r.score).collect();
    let flags: Vec<bool> = id.iter().map(|r| r.is_correct()).collect();
    Ok(Evaluation {
        metrics,
        reliability: reliability_bins(&scores, &flags, cfg.bins)?,
        unified,
    })
}

/// `layer,kappa,C,top3_acc,status` over the configured grid, one block per layer.
pub fn tune(cfg: &PipelineConfig, subject: &Subject, train: &Observations, val: &Observations) -> Result<Vec<(String, TuneResult)>> {
    let names = cfg.layer_names();
    let maps = subject.layer_maps(&names)?;
    let n_labels = train
        .probs
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let data = TuneData {
                map: &maps[j],
                train: &train.activations[j],
                train_labels: train.require_labels()?,
                val: &val.activations[j],
                val_labels: val.require_labels()?,
                n_labels,
            };
            let r = tune_layer(data, &cfg.tune.kappa_grid, &cfg.tune.cluster_grid, &cfg.gmm_for_layer(j))
                .map_err(|e| e.in_stage(name, "tune"))?;
            log::info!("layer `{name}`: best kappa {} C {} (top-3 {:.4})", r.best_kappa, r.best_clusters, r.best_accuracy);
            Ok((name.clone(), r))
        })
        .collect()
}

pub fn tuning_csv(results: &[(String, TuneResult)]) -> String {
    let mut out = String::from("layer,kappa,C,top3_acc,status\n");
    for (name, r) in results {
        for line in r.to_csv().lines().skip(1) {
            out.push_str(&format!("{name},{line}\n"));
        }
    }
    out
}

/// Attack outcome stored as a dataset tagged with the attack name, plus
/// `attack/source_index` and `attack/asr`.
pub fn attack_archive(cfg: &PipelineConfig, outcome: &AttackOutcome) -> Result<TensorArchive> {
    with_manifest("attack", cfg, |a| {
        outcome.adversarial.write_to(a)?;
        a.insert(
            "attack/source_index",
            Tensor::vector_i64(outcome.source_index.iter().map(|&i| i as i64).collect()),
        )?;
        a.insert("attack/asr", Tensor::scalar_f64(outcome.asr))
    })
}

pub fn attack(cfg: &PipelineConfig, net: &RefNet, data: &Dataset) -> Result<AttackOutcome> {
    run_attack(net.as_mlp()?, data, &cfg.attack)
}

/// Reads `kernels`, `bias`, `conv_meta` and writes the unrolled `W`, `b`.
pub fn unroll(cfg: &PipelineConfig, spec_archive: &TensorArchive) -> Result<TensorArchive> {
    let spec = ConvSpec::read_from(spec_archive, "")?;
    let map = toeplitz_unroll(&spec)?;
    with_manifest("unroll", cfg, |a| map.write_to(a, ""))
}

/// Train / val / test blobs, the shifted OOD set and the corruption ladder
/// of the test set, keyed by file stem.
pub fn synth(cfg: &PipelineConfig) -> Result<IndexMap<String, Dataset>> {
    let s = &cfg.synth;
    if s.n_labels < 2 || s.dim == 0 || s.n_train == 0 || s.n_test == 0 {
        return Err(Error::Config("synth needs >= 2 labels, a positive dimension and non-empty splits".into()));
    }
    let total = s.n_train + s.n_val + s.n_test;
    let spec = SynthSpec::with_random_means(
        s.n_labels,
        s.dim,
        total.div_ceil(s.n_labels),
        s.sigma,
        s.mean_range,
        stage_seed(cfg.seed, stage::SYNTH),
    );
    let range = s.clip.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let clamp = |mut d: Dataset| {
        for row in &mut d.x {
            for v in row.iter_mut() {
                *v = v.clamp(range.0, range.1);
            }
        }
        d
    };
    let all = clamp(gen_blobs(&spec));
    let mut out = IndexMap::new();
    out.insert("train".to_string(), all.slice(0..s.n_train, "train"));
    out.insert("val".to_string(), all.slice(s.n_train..s.n_train + s.n_val, "val"));
    let test = all.slice(s.n_train + s.n_val..total, &cfg.eval.id_tag);
    let ood = clamp(gen_ood(&spec, s.ood_shift * s.sigma));
    out.insert("ood".to_string(), ood.slice(0..s.n_test, "ood"));
    for i in 1..=s.intensities {
        let c = corrupt(&test, i, s.corruption_sigma, range, stage_seed(cfg.seed, stage::CORRUPT));
        out.insert(format!("corrupt{i}"), c);
    }
    out.insert("test".to_string(), test);
    Ok(out)
}

pub fn dataset_archive(cfg: &PipelineConfig, command: &str, data: &Dataset) -> Result<TensorArchive> {
    with_manifest(command, cfg, |a| data.write_to(a))
}

/// He-initialized MLP `d -> hidden... -> L` trained with seeded SGD.
pub fn train_refnet(cfg: &PipelineConfig, train: &Dataset) -> Result<(MlpNet, TrainReport)> {
    let labels = train.require_labels()?;
    let n_labels = labels.iter().max().map(|m| m + 1).ok_or_else(|| Error::invalid("training set is empty"))?;
    let mut dims = vec![train.dim()];
    dims.extend(&cfg.refnet.hidden);
    dims.push(n_labels.max(cfg.synth.n_labels));
    let mut net = MlpNet::init(&dims, stage_seed(cfg.seed, stage::INIT))?;
    let report = net.train_sgd(train, &cfg.refnet.sgd)?;
    Ok((net, report))
}

pub fn net_archive(cfg: &PipelineConfig, net: &RefNet) -> Result<TensorArchive> {
    with_manifest("refnet-train", cfg, |a| net.write_to(a))
}

/// Summary of [`run_demo`].
#[derive(Debug, Clone)]
pub struct DemoSummary {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub asr: f64,
    pub n_adversarial: usize,
    pub evaluation: Evaluation,
    pub rows: Vec<ScoreRow>,
}

/// synth -> train -> fit -> attack -> score -> eval, writing every artifact
/// into `out`.
pub fn run_demo(cfg: &PipelineConfig, out: &Path) -> Result<DemoSummary> {
    fs::create_dir_all(out)?;
    let sets = synth(cfg)?;
    for (name, d) in &sets {
        dataset_archive(cfg, "synth", d)?.save(out.join(format!("{name}.tarc")))?;
    }
    let (mlp, report) = train_refnet(cfg, &sets["train"])?;
    let test_accuracy = mlp.accuracy(&sets["test"])?;
    log::info!("reference net: train accuracy {:.4}, test accuracy {test_accuracy:.4}", report.train_accuracy);
    let net = RefNet::Mlp(mlp);
    net_archive(cfg, &net)?.save(out.join("net.tarc"))?;

    let subject = Subject::Net(net.clone());
    let observe = |d: &Dataset| {
        Observations::from_network(&net, d, &cfg.layer_names(), cfg.baselines.dmd_layer.as_deref())
    };
    let model = fit(cfg, &subject, &observe(&sets["train"])?, &observe(&sets["val"])?)?;
    model.to_archive()?.save(out.join("model.tarc"))?;

    let outcome = attack(cfg, &net, &sets["test"])?;
    log::info!("{}: ASR {:.4}, {} adversarial samples", cfg.attack.kind.name(), outcome.asr, outcome.adversarial.len());
    attack_archive(cfg, &outcome)?.save(out.join("adv.tarc"))?;

    let mut scored: Vec<&Dataset> = vec![&sets["test"], &sets["ood"]];
    scored.extend((1..=cfg.synth.intensities).map(|i| &sets[&format!("corrupt{i}")]));
    scored.push(&outcome.adversarial);
    let mut rows = Vec::new();
    for d in scored {
        rows.extend(score(&model, &observe(d)?)?);
    }
    let report_csv = ScoreReport { rows: rows.clone() };
    fs::write(out.join("scores.csv"), report_csv.to_csv())?;
    let evaluation = evaluate(&rows, &cfg.eval)?;
    evaluation.write(out)?;
    Ok(DemoSummary {
        train_accuracy: report.train_accuracy,
        test_accuracy,
        asr: outcome.asr,
        n_adversarial: outcome.adversarial.len(),
        evaluation,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.synth = SynthConfig {
            n_labels: 3,
            dim: 6,
            n_train: 300,
            n_val: 60,
            n_test: 90,
            intensities: 2,
            ..SynthConfig::default()
        };
        cfg.refnet = RefnetConfig {
            hidden: vec![12],
            sgd: SgdConfig { epochs: 20, ..SgdConfig::default() },
        };
        cfg.layers = vec![
            LayerSpec { name: "net/layer0".into(), kappa: 3, clusters: 4 },
            LayerSpec { name: "net/layer1".into(), kappa: 3, clusters: 4 },
        ];
        cfg.resolve_seeds();
        cfg
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = small_config();
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.clone().with_seed(9).hash(), cfg.hash());
        assert!(PipelineConfig::from_json(r#"{"zeta": 1.5}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"layers": []}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = PipelineConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(partial, PipelineConfig::default().with_seed(4));
    }

    #[test]
    fn missing_layer_is_named() {
        let mut cfg = small_config();
        cfg.layers[1].name = "net/layer7".into();
        let sets = synth(&cfg).unwrap();
        let (mlp, _) = train_refnet(&cfg, &sets["train"]).unwrap();
        let err = Subject::Net(RefNet::Mlp(mlp)).layer_maps(&cfg.layer_names()).unwrap_err();
        assert!(err.to_string().contains("net/layer7"), "{err}");
    }

    #[test]
    fn fit_score_eval_small() {
        let cfg = small_config();
        let sets = synth(&cfg).unwrap();
        let (mlp, _) = train_refnet(&cfg, &sets["train"]).unwrap();
        let net = RefNet::Mlp(mlp);
        let subject = Subject::Net(net.clone());
        let names = cfg.layer_names();
        let obs = |d: &Dataset| Observations::from_network(&net, d, &names, None).unwrap();
        let model = fit(&cfg, &subject, &obs(&sets["train"]), &obs(&sets["val"])).unwrap();

        let archive = model.to_archive().unwrap();
        let back = FittedModel::read_from(&archive).unwrap();
        assert_eq!(back.to_archive().unwrap().to_bytes().unwrap(), archive.to_bytes().unwrap());

        let mut rows = score(&back, &obs(&sets["test"])).unwrap();
        rows.extend(score(&back, &obs(&sets["ood"])).unwrap());
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.score));
            for d in DETECTORS {
                let v = r.detector(d).unwrap();
                assert!((0.0..=1.0).contains(&v), "{d} = {v}");
            }
        }
        let ev = evaluate(&rows, &cfg.eval).unwrap();
        assert!(ev.get("score", "ood").is_some());
        assert_eq!(ev.reliability.iter().map(|b| b.count).sum::<usize>(), sets["test"].len());
        assert!(ev.unified_csv().starts_with("detector,case,fpr\nscore,ood,"));
    }

    #[test]
    fn eval_with_id_copy_is_half() {
        let rows: Vec<ScoreRow> = (0..40)
            .flat_map(|t| {
                let base = ScoreRow {
                    sample_id: t,
                    prediction: t % 2,
                    true_label: Some(if t % 5 == 0 { 1 - t % 2 } else { t % 2 }),
                    msp: 0.5 + (t as f64) / 100.0,
                    score: (t as f64 * 0.37).sin().abs(),
                    tag: "id".into(),
                    doctor: None,
                    dmd: None,
                    fs: None,
                };
                let copy = ScoreRow { tag: "copy".into(), ..base.clone() };
                [base, copy]
            })
            .collect();
        let ev = evaluate(&rows, &EvalConfig::default()).unwrap();
        assert_eq!(ev.get("score", "copy").unwrap().auc, 0.5);
        assert!(ev.get("doctor", "copy").is_none());
    }

    #[test]
    fn empty_data_scores_to_no_rows() {
        let cfg = small_config();
        let sets = synth(&cfg).unwrap();
        let (mlp, _) = train_refnet(&cfg, &sets["train"]).unwrap();
        let net = RefNet::Mlp(mlp);
        let subject = Subject::Net(net.clone());
        let names = cfg.layer_names();
        let obs = |d: &Dataset| Observations::from_network(&net, d, &names, None).unwrap();
        let model = fit(&cfg, &subject, &obs(&sets["train"]), &obs(&sets["val"])).unwrap();
        let empty = Observations::collect(&subject, &TensorArchive::new(), &cfg).unwrap();
        assert!(score(&model, &empty).unwrap().is_empty());
    }

    #[test]
    fn exported_mode_matches_network_mode() {
        let mut cfg = small_config();
        cfg.baselines.squeeze = None;
        cfg.baselines.dmd_layer = Some("net/layer1".into());
        let sets = synth(&cfg).unwrap();
        let (mlp, _) = train_refnet(&cfg, &sets["train"]).unwrap();
        let subject_net = Subject::Net(RefNet::Mlp(mlp.clone()));

        let mut weights = TensorArchive::new();
        for (name, map) in mlp.layer_maps(NET_PREFIX).unwrap() {
            map.write_to(&mut weights, &name).unwrap();
        }
        let export = |d: &Dataset| {
            let mut a = TensorArchive::new();
            let z: Vec<f64> = d.x.iter().flat_map(|x| mlp.probabilities(x).unwrap().as_slice().to_vec()).collect();
            a.insert("z", Tensor::from_f64(vec![d.len(), 3], z).unwrap()).unwrap();
            let inputs: Vec<Vec<DVector<f64>>> = d.x.iter().map(|x| mlp.layer_inputs(x).unwrap()).collect();
            for j in 0..2 {
                let flat: Vec<f64> = inputs.iter().flat_map(|i| i[j].as_slice().to_vec()).collect();
                let width = inputs[0][j].len();
                a.insert(format!("net/layer{j}"), Tensor::from_f64(vec![d.len(), width], flat).unwrap()).unwrap();
            }
            if let Some(l) = &d.labels {
                a.insert("label", Tensor::vector_i64(l.iter().map(|&v| v as i64).collect())).unwrap();
            }
            a
        };
        let subject_ex = Subject::from_archive(weights).unwrap();
        let tr = export(&sets["train"]);
        let va = export(&sets["val"]);
        let m_ex = fit(
            &cfg,
            &subject_ex,
            &Observations::collect(&subject_ex, &tr, &cfg).unwrap(),
            &Observations::collect(&subject_ex, &va, &cfg).unwrap(),
        )
        .unwrap();
        let ds = |name: &str| sets[name].to_archive().unwrap();
        let m_net = fit(
            &cfg,
            &subject_net,
            &Observations::collect(&subject_net, &ds("train"), &cfg).unwrap(),
            &Observations::collect(&subject_net, &ds("val"), &cfg).unwrap(),
        )
        .unwrap();
        let te_ex = score(&m_ex, &Observations::collect(&subject_ex, &export(&sets["test"]), &cfg).unwrap()).unwrap();
        let te_net = score(&m_net, &Observations::collect(&subject_net, &ds("test"), &cfg).unwrap()).unwrap();
        for (a, b) in te_ex.iter().zip(&te_net) {
            assert_eq!(a.prediction, b.prediction);
            assert!((a.score - b.score).abs() < 1e-9);
            assert!((a.doctor.unwrap() - b.doctor.unwrap()).abs() < 1e-9);
            assert!((a.dmd.unwrap() - b.dmd.unwrap()).abs() < 1e-9);
        }
    }
}
