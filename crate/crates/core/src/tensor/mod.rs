//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are contiguous row-major buffers in either 32-bit (training) or
//! 64-bit (verification) precision. The two precisions never mix inside one
//! graph: mixing is reported as [`TensorError::DtypeMismatch`].
//!
//! Reductions accumulate sequentially over the contiguous axis, so results
//! are bit-reproducible across runs on the same platform.

pub mod count;
pub mod graph;
pub mod kernels;
pub mod scan;

pub use graph::{Graph, NodeId, ParamId, ParamStore};
pub use kernels::Element;

use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: dtype mismatch between {lhs} and {rhs}")]
    DtypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("{op}: numeric domain violation at flat index {index} (value {value})")]
    NumericDomain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: non-finite value at step {step}")]
    NonFinite { op: &'static str, step: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Contiguous scalar storage in one of the two supported precisions.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, n: usize) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(vec![0.0; n]),
            DType::F64 => Buffer::F64(vec![0.0; n]),
        }
    }

    pub fn from_f64(dtype: DType, vals: &[f64]) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(vals.iter().map(|&v| v as f32).collect()),
            DType::F64 => Buffer::F64(vals.to_vec()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F64(v) => v.clone(),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Buffer::F32(v) => v[i] as f64,
            Buffer::F64(v) => v[i],
        }
    }

    pub fn set(&mut self, i: usize, val: f64) {
        match self {
            Buffer::F32(v) => v[i] = val as f32,
            Buffer::F64(v) => v[i] = val,
        }
    }
}

/// A plain tensor value: shape plus contiguous data. Participation in
/// differentiation happens by registering it on a [`Graph`], which hands back
/// the node handle linking it into the recorded operation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Buffer>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Buffer) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor_new",
                msg: format!(
                    "shape {:?} implies {} elements, buffer holds {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
        })
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(Buffer::zeros(dtype, n)),
        }
    }

    pub fn from_f32(shape: &[usize], vals: Vec<f32>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), Buffer::F32(vals))
    }

    pub fn from_f64(shape: &[usize], vals: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), Buffer::F64(vals))
    }

    pub fn scalar(dtype: DType, v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Rc::new(Buffer::from_f64(dtype, &[v])),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &Buffer {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Buffer> {
        Rc::clone(&self.data)
    }

    pub(crate) fn from_rc(shape: Vec<usize>, data: Rc<Buffer>) -> Tensor {
        Tensor { shape, data }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    /// Convert to the other precision (explicit; implicit mixing is an error).
    pub fn cast(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        Tensor {
            shape: self.shape.clone(),
            data: Rc::new(Buffer::from_f64(dtype, &self.to_f64_vec())),
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Trailing-axis broadcast rule. Shapes are right-aligned; paired extents must
/// be equal or one of them 1. Accepted pairs for ranks up to 3 (letters are
/// distinct extents > 1):
///
/// | lhs        | rhs        | out        |
/// |------------|------------|------------|
/// | [a]        | [a] or [1] | [a]        |
/// | [a, b]     | [b] or [1] | [a, b]     |
/// | [a, b]     | [a, 1]     | [a, b]     |
/// | [a, 1]     | [b]        | [a, b]     |
/// | [a, b, c]  | [c] / [b,c]| [a, b, c]  |
/// | [a, 1, c]  | [b, 1]     | [a, b, c]  |
///
/// and so on for every right-aligned combination; anything else is rejected.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides for reading `shape` as if broadcast to `out_shape` (stride 0 on
/// broadcast axes, left-padded with stride 0).
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}
