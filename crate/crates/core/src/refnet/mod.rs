//! Self-contained reference classifiers, synthetic data and gradient-sign
//! attacks, so the scoring pipeline can run without an external ML stack.

pub mod attacks;
mod cnn;
mod mlp;
pub mod synth;

pub use cnn::CnnNet;
pub use mlp::{softmax, ForwardPass, MlpNet, SgdConfig, TrainReport};

use nalgebra::DVector;

use crate::affine::AffineMap;
use crate::error::Result;
use crate::gmm::argmax;

/// A classifier whose analyzed layers are affine maps.
pub trait Network {
    fn input_dim(&self) -> usize;

    fn n_labels(&self) -> usize;

    fn logits(&self, x: &[f64]) -> Result<DVector<f64>>;

    fn probabilities(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// `argmax z(x)`, lowest index on ties.
    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.probabilities(x)?.as_slice()))
    }

    /// Every affine layer, named `<prefix>/...`, in forward order.
    fn layer_maps(&self, prefix: &str) -> Result<Vec<(String, AffineMap)>>;

    /// Flattened input of each layer returned by [`layer_maps`](Self::layer_maps).
    fn layer_inputs(&self, x: &[f64]) -> Result<Vec<DVector<f64>>>;
}
