//! Unrolls a strided, padded, dilated convolution into one affine map and
//! checks it against the sliding-window implementation.

use mlcs::affine::{direct_conv, toeplitz_triplets, toeplitz_unroll, ConvSpec};
use mlcs::rng::SeededRng;
use mlcs::tensor::Tensor;

fn main() -> mlcs::Result<()> {
    let mut rng = SeededRng::new(3);
    let spec = ConvSpec {
        in_channels: 3,
        out_channels: 4,
        kernel: (3, 3),
        input: (12, 12),
        stride: (2, 2),
        padding: (1, 1),
        dilation: (1, 1),
        kernels: (0..4 * 3 * 9).map(|_| rng.normal()).collect(),
        bias: vec![0.1, 0.2, 0.3, 0.4],
    };
    let map = toeplitz_unroll(&spec)?;
    let sparse = toeplitz_triplets(&spec)?;
    println!(
        "W is {} x {} with {} nonzeros ({:.1}% dense)",
        map.output_dim(),
        map.input_dim(),
        sparse.nnz(),
        100.0 * sparse.nnz() as f64 / (sparse.rows * sparse.cols) as f64
    );

    let x: Vec<f64> = (0..spec.input_len()).map(|_| rng.uniform()).collect();
    let via_matrix = map.apply(&x)?;
    let image = Tensor::from_f64(vec![3, 12, 12], x)?;
    let direct = direct_conv(&spec, &image)?.to_f64_vec();
    let err = via_matrix.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |W x + b - conv(x)| = {err:.2e}");
    Ok(())
}
