//! Dense n-dimensional value storage with an explicit element kind.
//!
//! Computation inside the crate runs in double precision (`f64` /
//! `Complex64`); this type exists so files and checkpoints can carry any of
//! the supported element kinds and round-trip bit-exactly.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use num_complex::{Complex32, Complex64};

/// Element kind, in the order of the on-disk dtype codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real32,
    Real64,
    Complex64,
    Complex128,
    Bool,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Real64 => 1,
            DType::Complex64 => 2,
            DType::Complex128 => 3,
            DType::Bool => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::Real32,
            1 => DType::Real64,
            2 => DType::Complex64,
            3 => DType::Complex128,
            4 => DType::Bool,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    /// Bytes per element as stored on disk.
    pub fn elem_size(self) -> usize {
        match self {
            DType::Real32 => 4,
            DType::Real64 => 8,
            DType::Complex64 => 8,
            DType::Complex128 => 16,
            DType::Bool => 1,
        }
    }
}

/// A shape-tagged, contiguous (row-major) buffer of one element kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    R32(ArrayD<f32>),
    R64(ArrayD<f64>),
    C64(ArrayD<Complex32>),
    C128(ArrayD<Complex64>),
    Bool(ArrayD<bool>),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::R32(_) => DType::Real32,
            Tensor::R64(_) => DType::Real64,
            Tensor::C64(_) => DType::Complex64,
            Tensor::C128(_) => DType::Complex128,
            Tensor::Bool(_) => DType::Bool,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::R32(a) => a.shape(),
            Tensor::R64(a) => a.shape(),
            Tensor::C64(a) => a.shape(),
            Tensor::C128(a) => a.shape(),
            Tensor::Bool(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every element is finite (vacuously true for booleans).
    pub fn all_finite(&self) -> bool {
        match self {
            Tensor::R32(a) => a.iter().all(|v| v.is_finite()),
            Tensor::R64(a) => a.iter().all(|v| v.is_finite()),
            Tensor::C64(a) => a.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
            Tensor::C128(a) => a.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
            Tensor::Bool(_) => true,
        }
    }

    /// Widen to a double-precision complex array (reals get zero imaginary
    /// parts, booleans map to 0/1).
    pub fn to_c128(&self) -> ArrayD<Complex64> {
        match self {
            Tensor::R32(a) => a.mapv(|v| Complex64::new(v as f64, 0.0)),
            Tensor::R64(a) => a.mapv(|v| Complex64::new(v, 0.0)),
            Tensor::C64(a) => a.mapv(|v| Complex64::new(v.re as f64, v.im as f64)),
            Tensor::C128(a) => a.clone(),
            Tensor::Bool(a) => a.mapv(|v| Complex64::new(if v { 1.0 } else { 0.0 }, 0.0)),
        }
    }

    /// Widen to a double-precision real array.
    ///
    /// Errors on complex input; taking magnitudes is an explicit caller
    /// decision, not a conversion.
    pub fn to_r64(&self) -> Result<ArrayD<f64>> {
        Ok(match self {
            Tensor::R32(a) => a.mapv(|v| v as f64),
            Tensor::R64(a) => a.clone(),
            Tensor::Bool(a) => a.mapv(|v| if v { 1.0 } else { 0.0 }),
            _ => return Err(Error::Usage("complex tensor where real expected".into())),
        })
    }

    pub fn as_bool(&self) -> Result<&ArrayD<bool>> {
        match self {
            Tensor::Bool(a) => Ok(a),
            other => Err(Error::Usage(format!("expected bool tensor, got {:?}", other.dtype()))),
        }
    }

    /// Narrow a double-precision tensor to its single-precision counterpart
    /// (used when a checkpoint or dataset is written at reduced precision).
    pub fn to_single(&self) -> Tensor {
        match self {
            Tensor::R64(a) => Tensor::R32(a.mapv(|v| v as f32)),
            Tensor::C128(a) => {
                Tensor::C64(a.mapv(|v| Complex32::new(v.re as f32, v.im as f32)))
            }
            other => other.clone(),
        }
    }
}

impl From<ArrayD<f64>> for Tensor {
    fn from(a: ArrayD<f64>) -> Self {
        Tensor::R64(a)
    }
}

impl From<ArrayD<Complex64>> for Tensor {
    fn from(a: ArrayD<Complex64>) -> Self {
        Tensor::C128(a)
    }
}

impl From<ArrayD<bool>> for Tensor {
    fn from(a: ArrayD<bool>) -> Self {
        Tensor::Bool(a)
    }
}

/// Build an `IxDyn` shape from extents, validating the element count.
pub fn shape_of(extents: &[u64]) -> Result<IxDyn> {
    let dims: Vec<usize> = extents.iter().map(|&e| e as usize).collect();
    let count: usize = dims.iter().product();
    if count == 0 && !dims.is_empty() {
        return Err(Error::Format("zero-sized extent".into()));
    }
    Ok(IxDyn(&dims))
}
