//! Dense row-major tensors and the TARC-v1 archive container.
//!
//! Every tensor is stored row-major (last index fastest). Computation happens
//! in `f64`; `f32` payloads are widened when converted to matrices or vectors.

mod archive;

pub use archive::{ArchiveError, TensorArchive, MAGIC};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Element type codes as written in the archive header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I64 = 2,
    U8 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A dense tensor. `data.len()` always equals the product of `shape`
/// (an empty shape is a scalar holding one element).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn from_i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Tensor::new(shape, TensorData::I64(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Tensor::new(shape, TensorData::U8(data))
    }

    pub fn scalar_f64(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: TensorData::F64(vec![value]),
        }
    }

    pub fn vector_f64(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: TensorData::F64(values),
        }
    }

    pub fn vector_i64(values: Vec<i64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: TensorData::I64(values),
        }
    }

    /// UTF-8 text stored as a rank-1 `u8` tensor.
    pub fn text(s: &str) -> Self {
        let bytes = s.as_bytes().to_vec();
        Tensor {
            shape: vec![bytes.len()],
            data: TensorData::U8(bytes),
        }
    }

    /// Row-major copy of a matrix as a rank-2 `f64` tensor.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data: TensorData::F64(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Rank-1 view of the same elements in row-major order.
    pub fn flatten(&self) -> Tensor {
        Tensor {
            shape: vec![self.numel()],
            data: self.data.clone(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Elements widened (or cast) to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    /// Integer elements; floating payloads are rejected.
    pub fn to_i64_vec(&self) -> Result<Vec<i64>> {
        match &self.data {
            TensorData::I64(v) => Ok(v.clone()),
            TensorData::U8(v) => Ok(v.iter().map(|&x| i64::from(x)).collect()),
            other => Err(Error::invalid(format!(
                "expected an integer tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        match &self.data {
            TensorData::U8(v) => String::from_utf8(v.clone())
                .map_err(|e| Error::invalid(format!("text tensor is not UTF-8: {e}"))),
            other => Err(Error::invalid(format!(
                "expected a u8 text tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn to_scalar_f64(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "expected a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.to_f64_vec()[0])
    }

    /// Rank-2 tensor as a matrix (rows = first extent).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "expected rank 2, shape is {:?}",
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        Ok(DMatrix::from_row_slice(rows, cols, &self.to_f64_vec()))
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_f64_vec())
    }
}
