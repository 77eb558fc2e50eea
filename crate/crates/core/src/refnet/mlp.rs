use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::synth::Dataset;
use super::Network;
use crate::affine::AffineMap;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorArchive};

/// Affine layers with ReLU in between and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    layers: Vec<AffineMap>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `inputs[j]` is the input of layer `j` (the raw sample for `j = 0`).
    pub inputs: Vec<DVector<f64>>,
    /// `pre_activations[j] = W_j inputs[j] + b_j`; the last one holds the logits.
    pub pre_activations: Vec<DVector<f64>>,
    pub probabilities: DVector<f64>,
}

impl ForwardPass {
    pub fn logits(&self) -> &DVector<f64> {
        self.pre_activations.last().expect("network has at least one layer")
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let mut e = logits.map(|l| (l - max).exp());
    let s = e.sum();
    e /= s;
    e
}

pub(crate) fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MlpNet {
    pub fn new(layers: Vec<AffineMap>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {j} outputs {} values, layer {} expects {}",
                    pair[0].output_dim(),
                    j + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(MlpNet { layers })
    }

    /// He-initialized weights and zero biases for `dims = [d0, .., dD]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("layer dims need at least two positive entries"));
        }
        let mut rng = SeededRng::new(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let scale = (2.0 / d[0] as f64).sqrt();
                let w = DMatrix::from_fn(d[1], d[0], |_, _| scale * rng.normal());
                AffineMap::new(w, DVector::zeros(d[1]))
            })
            .collect::<Result<Vec<_>>>()?;
        MlpNet::new(layers)
    }

    pub fn layers(&self) -> &[AffineMap] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].input_dim()];
        d.extend(self.layers.iter().map(AffineMap::output_dim));
        d
    }

    pub fn n_labels(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = DVector::from_column_slice(x);
        for (j, layer) in self.layers.iter().enumerate() {
            let y = layer.apply(h.as_slice())?;
            inputs.push(h);
            h = if j + 1 < self.layers.len() { relu(&y) } else { y.clone() };
            pre.push(y);
        }
        let probabilities = softmax(pre.last().unwrap());
        Ok(ForwardPass {
            inputs,
            pre_activations: pre,
            probabilities,
        })
    }

    /// Backpropagates `dL/dlogits` and returns `dL/dx`, collecting parameter
    /// gradients into `grads` when given.
    fn backward(
        &self,
        pass: &ForwardPass,
        mut delta: DVector<f64>,
        mut grads: Option<&mut [(DMatrix<f64>, DVector<f64>)]>,
    ) -> DVector<f64> {
        for j in (0..self.layers.len()).rev() {
            if let Some(g) = grads.as_deref_mut() {
                g[j].0.ger(1.0, &delta, &pass.inputs[j], 1.0);
                g[j].1 += &delta;
            }
            let grad_in = self.layers[j].weights().tr_mul(&delta);
            if j == 0 {
                return grad_in;
            }
            // ReLU'(0) taken as 0
            delta = grad_in.zip_map(&pass.pre_activations[j - 1], |g, p| if p > 0.0 { g } else { 0.0 });
        }
        unreachable!("loop returns at layer 0")
    }

    /// Gradient of the cross-entropy at `label` with respect to the input.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<DVector<f64>> {
        let pass = self.forward(x)?;
        if label >= self.n_labels() {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        let mut delta = pass.probabilities.clone();
        delta[label] -= 1.0;
        Ok(self.backward(&pass, delta, None))
    }

    pub fn cross_entropy(&self, x: &[f64], label: usize) -> Result<f64> {
        let pass = self.forward(x)?;
        let logits = pass.logits();
        let max = logits.max();
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(lse - logits[label])
    }

    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        let labels = data.require_labels()?;
        let mut total = 0.0;
        for (x, &l) in data.x.iter().zip(labels) {
            total += self.cross_entropy(x, l)?;
        }
        Ok(total / data.len() as f64)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let labels = data.require_labels()?;
        let mut hits = 0usize;
        for (x, &l) in data.x.iter().zip(labels) {
            if self.predict(x)? == l {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Mini-batch SGD on cross-entropy. The sample order of every epoch is
    /// drawn from `config.seed`.
    pub fn train_sgd(&mut self, data: &Dataset, config: &SgdConfig) -> Result<TrainReport> {
        let labels = data.require_labels()?.to_vec();
        if data.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        let batch = config.batch_size.max(1);
        let mut rng = SeededRng::new(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_loss = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            rng.shuffle(&mut order);
            let mut loss = 0.0;
            for chunk in order.chunks(batch) {
                let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = self
                    .layers
                    .iter()
                    .map(|l| (DMatrix::zeros(l.output_dim(), l.input_dim()), DVector::zeros(l.output_dim())))
                    .collect();
                for &t in chunk {
                    let pass = self.forward(&data.x[t])?;
                    let l = labels[t];
                    loss -= pass.probabilities[l].max(f64::MIN_POSITIVE).ln();
                    let mut delta = pass.probabilities.clone();
                    delta[l] -= 1.0;
                    self.backward(&pass, delta, Some(&mut grads));
                }
                let step = config.lr / chunk.len() as f64;
                for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads) {
                    *layer.weights_mut() -= gw * step;
                    *layer.bias_mut() -= gb * step;
                }
            }
            epoch_loss.push(loss / data.len() as f64);
        }
        Ok(TrainReport {
            epoch_loss,
            train_accuracy: self.accuracy(data)?,
        })
    }

    /// Entries `<prefix>/layer<i>/W` and `<prefix>/layer<i>/b`.
    pub fn write_to(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        archive.insert(format!("{prefix}/kind"), Tensor::text("mlp"))?;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.write_to(archive, &format!("{prefix}/layer{i}"))?;
        }
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while archive.contains(&format!("{prefix}/layer{}/W", layers.len())) {
            layers.push(AffineMap::read_from(archive, &format!("{prefix}/layer{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(Error::missing(format!("no `{prefix}/layer0/W` entry")));
        }
        MlpNet::new(layers)
    }
}

impl Network for MlpNet {
    fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    fn n_labels(&self) -> usize {
        MlpNet::n_labels(self)
    }

    fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.forward(x)?.logits().clone())
    }

    fn layer_maps(&self, prefix: &str) -> Result<Vec<(String, AffineMap)>> {
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("{prefix}/layer{i}"), l.clone()))
            .collect())
    }

    fn layer_inputs(&self, x: &[f64]) -> Result<Vec<DVector<f64>>> {
        Ok(self.forward(x)?.inputs)
    }
}
