//! Untargeted L-infinity gradient-sign attacks (FGSM, BIM, PGD).

use serde::{Deserialize, Serialize};

use super::synth::Dataset;
use super::{MlpNet, Network};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// The budget used throughout the experiments, `8/255`.
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget.
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size; `None` means `epsilon / 4`.
    pub alpha: Option<f64>,
    /// Start from a uniform point of the epsilon ball (always on for PGD).
    pub random_start: bool,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: DEFAULT_EPSILON,
            steps: 10,
            alpha: None,
            random_start: true,
            clip_lo: 0.0,
            clip_hi: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.steps == 0 {
            return Err(Error::invalid("attack needs epsilon >= 0 and at least one step"));
        }
        if self.steps > 1 && !(self.step_size() > 0.0) && self.epsilon > 0.0 {
            return Err(Error::invalid("iterative attacks need a positive step size"));
        }
        if self.clip_lo > self.clip_hi {
            return Err(Error::invalid("clip range is empty"));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(candidate: &mut [f64], origin: &[f64], cfg: &AttackConfig) {
    for (c, &o) in candidate.iter_mut().zip(origin) {
        *c = c.clamp(o - cfg.epsilon, o + cfg.epsilon).clamp(cfg.clip_lo, cfg.clip_hi);
    }
}

fn iterate(net: &MlpNet, x: &[f64], label: usize, start: Vec<f64>, steps: usize, alpha: f64, cfg: &AttackConfig) -> Result<Vec<f64>> {
    let mut adv = start;
    for _ in 0..steps {
        let g = net.input_gradient(&adv, label)?;
        for (a, gi) in adv.iter_mut().zip(g.iter()) {
            *a += alpha * sign(*gi);
        }
        project(&mut adv, x, cfg);
    }
    Ok(adv)
}

/// `clip(x + epsilon * sign(grad))`: one BIM step of size epsilon.
pub fn fgsm(net: &MlpNet, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    iterate(net, x, label, x.to_vec(), 1, cfg.epsilon, cfg)
}

/// `steps` signed-gradient steps, each projected onto the epsilon ball and
/// the clip range.
pub fn bim(net: &MlpNet, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    iterate(net, x, label, x.to_vec(), cfg.steps, cfg.step_size(), cfg)
}

/// BIM from a uniform random start inside the epsilon ball.
pub fn pgd(net: &MlpNet, x: &[f64], label: usize, cfg: &AttackConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut start: Vec<f64> = x.iter().map(|&v| v + rng.uniform_range(-cfg.epsilon, cfg.epsilon)).collect();
    project(&mut start, x, cfg);
    iterate(net, x, label, start, cfg.steps, cfg.step_size(), cfg)
}

/// Dispatches on `cfg.kind`; random starts for BIM honour `cfg.random_start`.
pub fn attack(net: &MlpNet, x: &[f64], label: usize, cfg: &AttackConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(net, x, label, cfg),
        AttackKind::Bim if cfg.random_start => pgd(net, x, label, cfg, rng),
        AttackKind::Bim => bim(net, x, label, cfg),
        AttackKind::Pgd => pgd(net, x, label, cfg, rng),
    }
}

/// Successful adversarial samples over correctly classified originals.
pub fn asr(orig_correct: &[bool], adv_changed: &[bool]) -> Result<f64> {
    if orig_correct.len() != adv_changed.len() {
        return Err(Error::shape("flag sequences differ in length"));
    }
    let correct = orig_correct.iter().filter(|&&c| c).count();
    if correct == 0 {
        return Err(Error::invalid("attack success rate is undefined without correct samples"));
    }
    let flipped = orig_correct.iter().zip(adv_changed).filter(|(&c, &f)| c && f).count();
    Ok(flipped as f64 / correct as f64)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Adversarial versions of originally correct samples that now mislead
    /// the network; labels are the original ones.
    pub adversarial: Dataset,
    /// Index into the source dataset of each adversarial sample.
    pub source_index: Vec<usize>,
    pub asr: f64,
}

/// Attacks every correctly classified sample of `data`.
pub fn run_attack(net: &MlpNet, data: &Dataset, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let labels = data.require_labels()?;
    let mut rng = SeededRng::derived(cfg.seed, 7);
    let mut correct = Vec::with_capacity(data.len());
    let mut changed = Vec::with_capacity(data.len());
    let mut adv_x = Vec::new();
    let mut adv_y = Vec::new();
    let mut source = Vec::new();
    for (t, (x, &l)) in data.x.iter().zip(labels).enumerate() {
        let ok = net.predict(x)? == l;
        correct.push(ok);
        if !ok {
            changed.push(false);
            continue;
        }
        let adv = attack(net, x, l, cfg, &mut rng)?;
        let flipped = net.predict(&adv)? != l;
        changed.push(flipped);
        if flipped {
            adv_x.push(adv);
            adv_y.push(l);
            source.push(t);
        }
    }
    Ok(AttackOutcome {
        adversarial: Dataset::new(adv_x, Some(adv_y), cfg.kind.name())?,
        source_index: source,
        asr: asr(&correct, &changed)?,
    })
}
