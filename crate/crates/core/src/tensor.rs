//! Dense tensors with f32/f16/i8 storage and per-tensor affine quantization.

use std::borrow::Cow;
use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but data has {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("i8 tensors require quantization parameters")]
    MissingQuant,
    #[error("quantization parameters are only valid on i8 tensors")]
    UnexpectedQuant,
    #[error("invalid quantization parameters: scale {scale}, zero point {zero_point}")]
    BadQuantParams { scale: f32, zero_point: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
        })
    }
}

/// Affine map between real values and stored 8-bit integers:
/// `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self, TensorError> {
        if !(scale.is_finite() && scale > 0.0) || !(-128..=127).contains(&zero_point) {
            return Err(TensorError::BadQuantParams { scale, zero_point });
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// Symmetric parameters for a tensor whose largest magnitude is `max_abs`.
    /// Stored values span [-127, 127]. Returns `None` for an all-zero range.
    pub fn symmetric(max_abs: f32) -> Option<Self> {
        if max_abs > 0.0 && max_abs.is_finite() {
            Some(QuantParams {
                scale: max_abs / 127.0,
                zero_point: 0,
            })
        } else {
            None
        }
    }

    /// Asymmetric parameters covering `[min, max]`, widened to include zero
    /// so that 0.0 is exactly representable. Returns `None` when the widened
    /// range is empty.
    pub fn asymmetric(min: f32, max: f32) -> Option<Self> {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = (hi - lo) / 255.0;
        if !(scale > 0.0 && scale.is_finite()) {
            return None;
        }
        let zp = (-128.0 - f64::from(lo) / f64::from(scale)).round();
        Some(QuantParams {
            scale,
            zero_point: zp.clamp(-128.0, 127.0) as i32,
        })
    }

    pub fn quantize(&self, x: f32) -> i8 {
        let q = (f64::from(x) / f64::from(self.scale)).round() + f64::from(self.zero_point);
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        (f64::from(self.scale) * f64::from(i32::from(q) - self.zero_point)) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
        }
    }
}

/// Row-major n-dimensional array. Activations are NHWC, conv weights HWIO.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    quant: Option<QuantParams>,
}

pub fn num_elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(
        shape: Vec<usize>,
        data: TensorData,
        quant: Option<QuantParams>,
    ) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected = num_elements(&shape);
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        match (&data, quant) {
            (TensorData::I8(_), None) => return Err(TensorError::MissingQuant),
            (TensorData::F32(_) | TensorData::F16(_), Some(_)) => {
                return Err(TensorError::UnexpectedQuant)
            }
            (_, Some(q)) => {
                QuantParams::new(q.scale, q.zero_point)?;
            }
            _ => {}
        }
        Ok(Tensor { shape, data, quant })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(data), None)
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>, quant: QuantParams) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::I8(data), Some(quant))
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: TensorData::F32(vec![value]),
            quant: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = num_elements(&shape);
        Tensor {
            shape,
            data: TensorData::F32(vec![0.0; n]),
            quant: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_size(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    /// Real-valued view: borrowed for f32, converted for f16, dequantized for i8.
    pub fn to_f32(&self) -> Cow<'_, [f32]> {
        match &self.data {
            TensorData::F32(v) => Cow::Borrowed(v),
            TensorData::F16(v) => Cow::Owned(v.iter().map(|x| x.to_f32()).collect()),
            TensorData::I8(v) => {
                let q = self.quant.expect("i8 tensor without quant params");
                Cow::Owned(v.iter().map(|&x| q.dequantize(x)).collect())
            }
        }
    }

    /// Same values as an f32 tensor.
    pub fn to_f32_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::F32(self.to_f32().into_owned()),
            quant: None,
        }
    }

    pub fn to_f16_tensor(&self) -> Tensor {
        let data = self.to_f32().iter().map(|&x| f16::from_f32(x)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::F16(data),
            quant: None,
        }
    }

    /// Quantize real values with the given parameters.
    pub fn quantize_with(&self, quant: QuantParams) -> Tensor {
        let data = self.to_f32().iter().map(|&x| quant.quantize(x)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::I8(data),
            quant: Some(quant),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if num_elements(&shape) != self.len() {
            return Err(TensorError::ElementCount {
                expected: num_elements(&shape),
                shape,
                actual: self.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Little-endian element bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
        }
    }

    pub fn from_le_bytes(
        shape: Vec<usize>,
        dtype: DType,
        bytes: &[u8],
        quant: Option<QuantParams>,
    ) -> Result<Self, TensorError> {
        let n = bytes.len() / dtype.size_bytes();
        if n * dtype.size_bytes() != bytes.len() {
            return Err(TensorError::ElementCount {
                expected: num_elements(&shape),
                shape,
                actual: n,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
        };
        Tensor::new(shape, data, quant)
    }
}
