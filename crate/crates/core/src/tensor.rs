//! Dense tensors and per-tensor affine quantization.
//!
//! Activations are NHWC, convolution weights OHWI. A tensor is either
//! `Real32` or `Int8`; int8 tensors always carry their quantization
//! parameters, so an int8 tensor without a scale cannot be constructed.
//!
//! Quantization is affine: `q = round_half_even(x / scale) + zero_point`,
//! saturating to `[-128, 127]`; dequantization is `x = scale * (q - zero_point)`.
//! Round-half-to-even is the one rounding rule used throughout the runtime.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, buffer holds {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("quantization range is degenerate (min == max == 0)")]
    DegenerateRange,
    #[error("quantization range must be finite, got ({min}, {max})")]
    NonFiniteRange { min: f32, max: f32 },
    #[error("range min {min} exceeds max {max}")]
    InvertedRange { min: f32, max: f32 },
    #[error("operation requires a {expected:?} tensor, got {actual:?}")]
    WrongDType { expected: DType, actual: DType },
}

/// Element representation of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real32,
    Int8,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::Real32 => 4,
            DType::Int8 => 1,
        }
    }
}

/// Affine quantization scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantScheme {
    /// zero_point fixed at 0; used for weights.
    Symmetric,
    /// zero_point chosen so that 0.0 is exactly representable; used for
    /// activations.
    Asymmetric,
}

/// Scale and zero point of an int8 tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Real units per integer step; always positive.
    pub scale: f32,
    pub zero_point: i8,
}

impl QuantParams {
    /// Derive parameters from an observed real range.
    ///
    /// Asymmetric ranges are first extended to include zero, which makes
    /// `dequantize(zero_point) == 0.0` exact (padding correctness).
    pub fn from_range(min: f32, max: f32, scheme: QuantScheme) -> Result<Self, TensorError> {
        if !min.is_finite() || !max.is_finite() {
            return Err(TensorError::NonFiniteRange { min, max });
        }
        if min > max {
            return Err(TensorError::InvertedRange { min, max });
        }
        if min == 0.0 && max == 0.0 {
            return Err(TensorError::DegenerateRange);
        }
        match scheme {
            QuantScheme::Symmetric => {
                let bound = f64::from(min.abs().max(max.abs()));
                Ok(Self {
                    scale: (bound / 127.0) as f32,
                    zero_point: 0,
                })
            }
            QuantScheme::Asymmetric => {
                let lo = f64::from(min.min(0.0));
                let hi = f64::from(max.max(0.0));
                let scale = (hi - lo) / 255.0;
                // Algebraically -128 - lo/scale; written over the un-rounded
                // quotient so that e.g. (-1, 1) lands exactly on -0.5.
                let zp_real = -128.0 - 255.0 * lo / (hi - lo);
                let zero_point = zp_real.round_ties_even().clamp(-128.0, 127.0) as i8;
                Ok(Self {
                    scale: scale as f32,
                    zero_point,
                })
            }
        }
    }

    /// Quantize one value; saturating.
    pub fn quantize_value(&self, x: f32) -> i8 {
        let q = (x / self.scale).round_ties_even() + f32::from(self.zero_point);
        q.clamp(-128.0, 127.0) as i8
    }

    /// Dequantize one value.
    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.scale * f32::from(i16::from(q) - i16::from(self.zero_point))
    }
}

/// Element storage; int8 data is inseparable from its quantization params.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real32(Vec<f32>),
    Int8 {
        values: Vec<i8>,
        qparams: QuantParams,
    },
}

/// N-dimensional dense array. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn real32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: TensorData::Real32(data),
        })
    }

    pub fn int8(
        shape: Vec<usize>,
        values: Vec<i8>,
        qparams: QuantParams,
    ) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            data: TensorData::Int8 { values, qparams },
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: TensorData::Real32(vec![0.0; n]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::Real32(_) => DType::Real32,
            TensorData::Int8 { .. } => DType::Int8,
        }
    }

    pub fn qparams(&self) -> Option<&QuantParams> {
        match &self.data {
            TensorData::Real32(_) => None,
            TensorData::Int8 { qparams, .. } => Some(qparams),
        }
    }

    pub fn as_real32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::Real32(v) => Ok(v),
            TensorData::Int8 { .. } => Err(TensorError::WrongDType {
                expected: DType::Real32,
                actual: DType::Int8,
            }),
        }
    }

    pub fn as_int8(&self) -> Result<&[i8], TensorError> {
        match &self.data {
            TensorData::Int8 { values, .. } => Ok(values),
            TensorData::Real32(_) => Err(TensorError::WrongDType {
                expected: DType::Int8,
                actual: DType::Real32,
            }),
        }
    }

    /// Payload size in bytes (elements times dtype width).
    pub fn byte_size(&self) -> usize {
        self.len() * self.dtype().byte_width()
    }

    /// Quantize a Real32 tensor elementwise; shape preserved, saturating.
    pub fn quantize(&self, qparams: QuantParams) -> Result<Tensor, TensorError> {
        let data = self.as_real32()?;
        let values = data.iter().map(|&x| qparams.quantize_value(x)).collect();
        Tensor::int8(self.shape.clone(), values, qparams)
    }

    /// Dequantize an Int8 tensor elementwise.
    pub fn dequantize(&self) -> Result<Tensor, TensorError> {
        match &self.data {
            TensorData::Int8 { values, qparams } => {
                let data = values
                    .iter()
                    .map(|&q| qparams.dequantize_value(q))
                    .collect();
                Tensor::real32(self.shape.clone(), data)
            }
            TensorData::Real32(_) => Err(TensorError::WrongDType {
                expected: DType::Int8,
                actual: DType::Real32,
            }),
        }
    }

    /// Observed (min, max) over a Real32 tensor; (0, 0) for empty tensors.
    pub fn value_range(&self) -> Result<(f32, f32), TensorError> {
        let data = self.as_real32()?;
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &x in data {
            min = min.min(x);
            max = max.max(x);
        }
        if data.is_empty() {
            return Ok((0.0, 0.0));
        }
        Ok((min, max))
    }
}
