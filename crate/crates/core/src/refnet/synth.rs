//! Gaussian-blob datasets, shifted out-of-distribution copies and a noise
//! corruption ladder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorArchive};

/// Labelled (or unlabelled) samples with a provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub tag: String,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, labels: Option<Vec<usize>>, tag: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != x.len() {
                return Err(Error::shape(format!("{} samples but {} labels", x.len(), l.len())));
            }
        }
        if let Some(first) = x.first() {
            if x.iter().any(|r| r.len() != first.len()) {
                return Err(Error::shape("samples differ in dimension"));
            }
        }
        Ok(Dataset {
            x,
            labels,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::missing(format!("dataset `{}` has no labels", self.tag)))
    }

    pub fn label(&self, t: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[t])
    }

    /// Samples `range`, keeping labels and tag.
    pub fn slice(&self, range: std::ops::Range<usize>, tag: &str) -> Dataset {
        Dataset {
            x: self.x[range.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
            tag: tag.to_string(),
        }
    }

    pub fn select(&self, indices: &[usize], tag: &str) -> Dataset {
        Dataset {
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            tag: tag.to_string(),
        }
    }

    /// `data/x` (N x d), `data/y` (N, i64; omitted when unlabelled), `data/tag` (UTF-8).
    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        let flat: Vec<f64> = self.x.iter().flatten().copied().collect();
        archive.insert("data/x", Tensor::from_f64(vec![self.len(), self.dim()], flat)?)?;
        if let Some(l) = &self.labels {
            archive.insert("data/y", Tensor::vector_i64(l.iter().map(|&v| v as i64).collect()))?;
        }
        archive.insert("data/tag", Tensor::text(&self.tag))?;
        Ok(())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        self.write_to(&mut a)?;
        Ok(a)
    }

    pub fn read_from(archive: &TensorArchive) -> Result<Self> {
        let x = archive.require("data/x")?;
        if x.rank() != 2 {
            return Err(Error::shape("`data/x` must be rank 2"));
        }
        let d = x.shape()[1];
        let flat = x.to_f64_vec();
        let rows: Vec<Vec<f64>> = if d == 0 {
            vec![Vec::new(); x.shape()[0]]
        } else {
            flat.chunks(d).map(<[f64]>::to_vec).collect()
        };
        let labels = match archive.get("data/y") {
            Some(y) => Some(
                y.to_i64_vec()?
                    .into_iter()
                    .map(|v| {
                        usize::try_from(v).map_err(|_| Error::invalid(format!("negative label {v} in `data/y`")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let tag = match archive.get("data/tag") {
            Some(t) => t.to_text()?,
            None => String::new(),
        };
        Dataset::new(rows, labels, tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_labels: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Within-class standard deviation, shared by every dimension.
    pub sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Class means drawn uniformly from `[lo, hi]^dim`.
    pub fn with_random_means(
        n_labels: usize,
        dim: usize,
        n_per_class: usize,
        sigma: f64,
        (lo, hi): (f64, f64),
        seed: u64,
    ) -> Self {
        let mut rng = SeededRng::derived(seed, 0);
        let class_means = (0..n_labels)
            .map(|_| (0..dim).map(|_| rng.uniform_range(lo, hi)).collect())
            .collect();
        SynthSpec {
            n_labels,
            dim,
            n_per_class,
            class_means,
            sigma,
            seed,
        }
    }

    fn sample(&self, means: &[Vec<f64>], rng: &mut SeededRng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(self.n_labels * self.n_per_class);
        let mut y = Vec::with_capacity(x.capacity());
        for (l, mean) in means.iter().enumerate() {
            for _ in 0..self.n_per_class {
                x.push(mean.iter().map(|&m| m + self.sigma * rng.normal()).collect());
                y.push(l);
            }
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        rng.shuffle(&mut order);
        (
            order.iter().map(|&i| x[i].clone()).collect(),
            order.iter().map(|&i| y[i]).collect(),
        )
    }

    /// Sign pattern in `{-1, +1}^dim` used by [`gen_ood`]; fixed by the seed.
    pub fn ood_direction(&self) -> Vec<f64> {
        let mut rng = SeededRng::derived(self.seed, 1);
        (0..self.dim).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect()
    }
}

/// `n_per_class` isotropic Gaussian samples around each class mean, shuffled.
pub fn gen_blobs(spec: &SynthSpec) -> Dataset {
    let mut rng = SeededRng::derived(spec.seed, 2);
    let (x, y) = spec.sample(&spec.class_means, &mut rng);
    Dataset {
        x,
        labels: Some(y),
        tag: "id".into(),
    }
}

/// Blobs whose means are moved by `shift` in every coordinate, with signs
/// from [`SynthSpec::ood_direction`]. The result is unlabelled.
pub fn gen_ood(spec: &SynthSpec, shift: f64) -> Dataset {
    let dir = spec.ood_direction();
    let means: Vec<Vec<f64>> = spec
        .class_means
        .iter()
        .map(|m| m.iter().zip(&dir).map(|(a, d)| a + shift * d).collect())
        .collect();
    let mut rng = SeededRng::derived(spec.seed, 3);
    let (x, _) = spec.sample(&means, &mut rng);
    Dataset {
        x,
        labels: None,
        tag: "ood".into(),
    }
}

/// Adds Gaussian noise of standard deviation `intensity * sigma_c` and clips
/// to `[lo, hi]`. Intensity 0 returns the data unchanged.
pub fn corrupt(data: &Dataset, intensity: u32, sigma_c: f64, (lo, hi): (f64, f64), seed: u64) -> Dataset {
    let tag = format!("corrupt{intensity}");
    if intensity == 0 {
        return Dataset {
            tag,
            ..data.clone()
        };
    }
    let std = f64::from(intensity) * sigma_c;
    let mut rng = SeededRng::derived(seed, 100 + u64::from(intensity));
    let x = data
        .x
        .iter()
        .map(|row| row.iter().map(|&v| (v + std * rng.normal()).clamp(lo, hi)).collect())
        .collect();
    Dataset {
        x,
        labels: data.labels.clone(),
        tag,
    }
}
