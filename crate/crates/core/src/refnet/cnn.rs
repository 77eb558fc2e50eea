use nalgebra::DVector;

use super::mlp::relu;
use super::{MlpNet, Network};
use crate::affine::{conv_output_shape, direct_conv, toeplitz_unroll, AffineMap, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorArchive};

/// One convolution + ReLU followed by a dense head. Forward only.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnNet {
    conv: ConvSpec,
    head: MlpNet,
}

impl CnnNet {
    pub fn new(conv: ConvSpec, head: MlpNet) -> Result<Self> {
        let (oh, ow) = conv_output_shape(&conv)?;
        let flat = conv.out_channels * oh * ow;
        if head.layers()[0].input_dim() != flat {
            return Err(Error::shape(format!(
                "convolution yields {flat} features, head expects {}",
                head.layers()[0].input_dim()
            )));
        }
        Ok(CnnNet { conv, head })
    }

    pub fn conv(&self) -> &ConvSpec {
        &self.conv
    }

    pub fn head(&self) -> &MlpNet {
        &self.head
    }

    fn conv_features(&self, x: &[f64]) -> Result<DVector<f64>> {
        let (ih, iw) = self.conv.input;
        let image = Tensor::from_f64(vec![self.conv.in_channels, ih, iw], x.to_vec())?;
        let y = direct_conv(&self.conv, &image)?;
        Ok(relu(&y.to_dvector()))
    }

    pub fn write_to(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        archive.insert(format!("{prefix}/kind"), Tensor::text("cnn"))?;
        self.conv.write_to(archive, &format!("{prefix}/conv0"))?;
        for (i, layer) in self.head.layers().iter().enumerate() {
            layer.write_to(archive, &format!("{prefix}/layer{i}"))?;
        }
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let conv = ConvSpec::read_from(archive, &format!("{prefix}/conv0"))?;
        let mut layers = Vec::new();
        while archive.contains(&format!("{prefix}/layer{}/W", layers.len())) {
            layers.push(AffineMap::read_from(archive, &format!("{prefix}/layer{}", layers.len()))?);
        }
        CnnNet::new(conv, MlpNet::new(layers)?)
    }
}

impl Network for CnnNet {
    fn input_dim(&self) -> usize {
        self.conv.input_len()
    }

    fn n_labels(&self) -> usize {
        self.head.n_labels()
    }

    fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        let h = self.conv_features(x)?;
        Ok(self.head.forward(h.as_slice())?.logits().clone())
    }

    fn layer_maps(&self, prefix: &str) -> Result<Vec<(String, AffineMap)>> {
        let mut maps = vec![(format!("{prefix}/conv0"), toeplitz_unroll(&self.conv)?)];
        maps.extend(self.head.layer_maps(prefix)?);
        Ok(maps)
    }

    fn layer_inputs(&self, x: &[f64]) -> Result<Vec<DVector<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let h = self.conv_features(x)?;
        let mut inputs = vec![DVector::from_column_slice(x)];
        inputs.extend(self.head.forward(h.as_slice())?.inputs);
        Ok(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn small_cnn() -> CnnNet {
        let mut rng = SeededRng::new(12);
        let conv = ConvSpec {
            in_channels: 1,
            out_channels: 2,
            kernel: (3, 3),
            input: (5, 5),
            stride: (1, 1),
            padding: (1, 1),
            dilation: (1, 1),
            kernels: (0..18).map(|_| rng.normal()).collect(),
            bias: vec![0.1, -0.1],
        };
        CnnNet::new(conv, MlpNet::init(&[50, 3], 2).unwrap()).unwrap()
    }

    #[test]
    fn unrolled_layers_reproduce_the_forward_pass() {
        let net = small_cnn();
        let mut rng = SeededRng::new(1);
        let x: Vec<f64> = (0..25).map(|_| rng.uniform()).collect();
        let maps = net.layer_maps("cnn").unwrap();
        let inputs = net.layer_inputs(&x).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].0, "cnn/conv0");
        let conv_out = maps[0].1.apply(inputs[0].as_slice()).unwrap();
        let relu_out = relu(&conv_out);
        assert!((relu_out - &inputs[1]).amax() < 1e-12);
        let logits = maps[1].1.apply(inputs[1].as_slice()).unwrap();
        assert!((logits - net.logits(&x).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn archive_round_trip() {
        let net = small_cnn();
        let mut ar = TensorArchive::new();
        net.write_to(&mut ar, "cnn").unwrap();
        assert_eq!(CnnNet::read_from(&ar, "cnn").unwrap(), net);
    }

    #[test]
    fn head_must_match_conv_output() {
        let net = small_cnn();
        assert!(CnnNet::new(net.conv().clone(), MlpNet::init(&[49, 3], 0).unwrap()).is_err());
    }
}
