//! Layers as affine operators `A = [W | b]`, including the Toeplitz
//! unrolling of 2-D convolutions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorArchive};

/// `y = W x + b`, with `W` of shape `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl AffineMap {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let (m, n) = weights.shape();
        if m == 0 || n == 0 {
            return Err(Error::shape(format!("affine map needs m, n >= 1, got {m}x{n}")));
        }
        if bias.len() != m {
            return Err(Error::shape(format!(
                "bias has length {}, weights have {m} rows",
                bias.len()
            )));
        }
        Ok(AffineMap { weights, bias })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut DVector<f64> {
        &mut self.bias
    }

    /// Output dimension `m`.
    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Input dimension `n`.
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// The `m x (n + 1)` operator `[W | b]`.
    pub fn augmented(&self) -> DMatrix<f64> {
        let (m, n) = self.weights.shape();
        let mut a = DMatrix::zeros(m, n + 1);
        a.view_mut((0, 0), (m, n)).copy_from(&self.weights);
        a.set_column(n, &self.bias);
        a
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has length {}, layer expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(&self.weights * DVector::from_column_slice(x) + &self.bias)
    }

    /// Entries `<prefix>/W` and `<prefix>/b` (bare `W`, `b` for an empty prefix).
    pub fn write_to(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        archive.insert(entry_name(prefix, "W"), Tensor::from_matrix(&self.weights))?;
        archive.insert(entry_name(prefix, "b"), Tensor::vector_f64(self.bias.iter().copied().collect()))?;
        Ok(())
    }

    pub fn read_from(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let w = archive.require(&entry_name(prefix, "W"))?.to_matrix()?;
        let b = archive.require(&entry_name(prefix, "b"))?.to_dvector();
        AffineMap::new(w, b)
    }
}

fn entry_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// `flatten(y) = W flatten(x) + b` as the free function form of [`AffineMap::apply`].
pub fn apply_affine(map: &AffineMap, x: &[f64]) -> Result<DVector<f64>> {
    map.apply(x)
}

/// A 2-D convolution (cross-correlation, zero padding) over a fixed input size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub input: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    /// Row-major `(out_channels, in_channels, kh, kw)`.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.input.0,
            self.input.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if extents.contains(&0) {
            return Err(Error::invalid(
                "channels, kernel/input extents, stride and dilation must be >= 1",
            ));
        }
        let expected = self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1;
        if self.kernels.len() != expected {
            return Err(Error::shape(format!(
                "kernels hold {} values, expected {expected}",
                self.kernels.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::shape(format!(
                "bias holds {} values, expected {}",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }

    pub fn kernel_at(&self, out_c: usize, in_c: usize, ky: usize, kx: usize) -> f64 {
        let (kh, kw) = self.kernel;
        self.kernels[((out_c * self.in_channels + in_c) * kh + ky) * kw + kx]
    }

    /// `c_i * ih * iw`.
    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.0 * self.input.1
    }

    pub fn write_to(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        let key = |name: &str| entry_name(prefix, name);
        let (kh, kw) = self.kernel;
        archive.insert(
            key("kernels"),
            Tensor::from_f64(vec![self.out_channels, self.in_channels, kh, kw], self.kernels.clone())?,
        )?;
        archive.insert(key("bias"), Tensor::vector_f64(self.bias.clone()))?;
        let meta = [
            self.in_channels,
            self.out_channels,
            kh,
            kw,
            self.input.0,
            self.input.1,
            self.stride.0,
            self.stride.1,
            self.padding.0,
            self.padding.1,
            self.dilation.0,
            self.dilation.1,
        ];
        archive.insert(key("conv_meta"), Tensor::vector_i64(meta.iter().map(|&v| v as i64).collect()))?;
        Ok(())
    }

    /// Reads `kernels`, `bias` and `conv_meta` (i64 or u8) under `prefix`.
    pub fn read_from(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let key = |name: &str| entry_name(prefix, name);
        let meta = archive.require(&key("conv_meta"))?.to_i64_vec()?;
        if meta.len() != 12 || meta.iter().any(|&v| v < 0) {
            return Err(Error::invalid(
                "conv_meta must hold 12 non-negative values [c_i,c_o,kh,kw,ih,iw,sh,sw,ph,pw,dh,dw]",
            ));
        }
        let m: Vec<usize> = meta.iter().map(|&v| v as usize).collect();
        let spec = ConvSpec {
            in_channels: m[0],
            out_channels: m[1],
            kernel: (m[2], m[3]),
            input: (m[4], m[5]),
            stride: (m[6], m[7]),
            padding: (m[8], m[9]),
            dilation: (m[10], m[11]),
            kernels: archive.require(&key("kernels"))?.to_f64_vec(),
            bias: archive.require(&key("bias"))?.to_f64_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// `(oh, ow)` for the given spec.
pub fn conv_output_shape(spec: &ConvSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    let oh = output_extent(spec.input.0, spec.kernel.0, spec.stride.0, spec.padding.0, spec.dilation.0);
    let ow = output_extent(spec.input.1, spec.kernel.1, spec.stride.1, spec.padding.1, spec.dilation.1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
        _ => Err(Error::invalid(format!(
            "convolution produces a non-positive output extent for input {:?}",
            spec.input
        ))),
    }
}

/// Coordinate-format sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTriplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseTriplets {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Sparse Toeplitz matrix `T` with `flatten(conv(x)) - bias = T flatten(x)`.
///
/// Row `j*oh*ow + oy*ow + ox` holds the receptive field of output pixel
/// `(oy, ox)` in channel `j`; column `i*ih*iw + iy*iw + ix` is input pixel
/// `(iy, ix)` in channel `i`. Taps landing in the zero padding are dropped.
pub fn toeplitz_triplets(spec: &ConvSpec) -> Result<SparseTriplets> {
    let (oh, ow) = conv_output_shape(spec)?;
    let (ih, iw) = spec.input;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let mut entries = Vec::new();
    for j in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (j * oh + oy) * ow + ox;
                for i in 0..spec.in_channels {
                    for ky in 0..kh {
                        let Some(iy) = (oy * sh + ky * dh).checked_sub(ph).filter(|&y| y < ih) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox * sw + kx * dw).checked_sub(pw).filter(|&x| x < iw) else {
                                continue;
                            };
                            let col = (i * ih + iy) * iw + ix;
                            entries.push((row, col, spec.kernel_at(j, i, ky, kx)));
                        }
                    }
                }
            }
        }
    }
    Ok(SparseTriplets {
        rows: spec.out_channels * oh * ow,
        cols: spec.input_len(),
        entries,
    })
}

/// The convolution as a dense affine map; the bias of channel `j` is
/// repeated over its `oh * ow` outputs.
pub fn toeplitz_unroll(spec: &ConvSpec) -> Result<AffineMap> {
    let (oh, ow) = conv_output_shape(spec)?;
    let t = toeplitz_triplets(spec)?;
    let bias = DVector::from_iterator(
        t.rows,
        spec.bias.iter().flat_map(|&b| std::iter::repeat_n(b, oh * ow)),
    );
    AffineMap::new(t.to_dense(), bias)
}

/// Sliding-window cross-correlation of a `c_i x ih x iw` image.
pub fn direct_conv(spec: &ConvSpec, image: &Tensor) -> Result<Tensor> {
    let (oh, ow) = conv_output_shape(spec)?;
    let (ih, iw) = spec.input;
    if image.shape() != [spec.in_channels, ih, iw] {
        return Err(Error::shape(format!(
            "image shape {:?}, convolution expects {:?}",
            image.shape(),
            [spec.in_channels, ih, iw]
        )));
    }
    let x = image.to_f64_vec();
    let (ph, pw) = spec.padding;
    let (hp, wp) = (ih + 2 * ph, iw + 2 * pw);
    let mut padded = vec![0.0; spec.in_channels * hp * wp];
    for c in 0..spec.in_channels {
        for y in 0..ih {
            let src = &x[(c * ih + y) * iw..(c * ih + y + 1) * iw];
            let start = (c * hp + y + ph) * wp + pw;
            padded[start..start + iw].copy_from_slice(src);
        }
    }

    let (kh, kw) = spec.kernel;
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for j in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * spec.stride.0;
                let x0 = ox * spec.stride.1;
                let mut acc = spec.bias[j];
                for c in 0..spec.in_channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let py = y0 + ky * spec.dilation.0;
                            let px = x0 + kx * spec.dilation.1;
                            acc += spec.kernel_at(j, c, ky, kx) * padded[(c * hp + py) * wp + px];
                        }
                    }
                }
                out[(j * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_f64(vec![spec.out_channels, oh, ow], out)
}
