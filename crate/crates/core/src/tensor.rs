//! Dense row-major tensors and the `.btnsr` on-disk format.
//!
//! The file layout is deliberately primitive so any language can parse it:
//! a 7-byte magic `BTNSR1\0`, one dtype byte (0 = f32, 1 = u8), one ndim
//! byte, `ndim` little-endian u64 dimensions, then the raw row-major
//! payload (f32 stored little-endian). Writing then reading a tensor is
//! bit-for-bit lossless regardless of host endianness.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// File magic, including the trailing NUL.
pub const MAGIC: [u8; 7] = *b"BTNSR1\0";

/// Maximum supported rank.
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a BTNSR1 tensor file")]
    BadMagic,
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("invalid ndim {0}: must be between 1 and 4")]
    BadNdim(usize),
    #[error("invalid dimension {0}: all dims must be >= 1")]
    BadDim(u64),
    #[error("truncated or oversized payload: expected {expected} bytes, found {found}")]
    Payload { expected: usize, found: usize },
    #[error("dtype mismatch: file holds {found}, expected {expected}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("shape/data mismatch: shape {shape:?} implies {expected} elements, got {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

/// Element kinds storable in a `.btnsr` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }
}

/// Scalar types that can live in a [`Tensor`].
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug + 'static {
    const DTYPE: Dtype;
    fn append_le(buf: &mut Vec<u8>, values: &[Self]);
    fn from_le(bytes: &[u8]) -> Vec<Self>;
    fn byte_width() -> usize;
    fn extract(any: AnyTensor) -> Result<Tensor<Self>, TensorError>;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn append_le(buf: &mut Vec<u8>, values: &[Self]) {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn from_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
    fn byte_width() -> usize {
        4
    }
    fn extract(any: AnyTensor) -> Result<Tensor<Self>, TensorError> {
        match any {
            AnyTensor::F32(t) => Ok(t),
            other => Err(TensorError::DtypeMismatch {
                expected: "f32",
                found: other.dtype().name(),
            }),
        }
    }
}

impl Element for u8 {
    const DTYPE: Dtype = Dtype::U8;
    fn append_le(buf: &mut Vec<u8>, values: &[Self]) {
        buf.extend_from_slice(values);
    }
    fn from_le(bytes: &[u8]) -> Vec<Self> {
        bytes.to_vec()
    }
    fn byte_width() -> usize {
        1
    }
    fn extract(any: AnyTensor) -> Result<Tensor<Self>, TensorError> {
        match any {
            AnyTensor::U8(t) => Ok(t),
            other => Err(TensorError::DtypeMismatch {
                expected: "u8",
                found: other.dtype().name(),
            }),
        }
    }
}

/// Dense n-dimensional array, row-major, rank 1..=4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n = checked_len(&shape)?;
        if n != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = checked_len(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = checked_len(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index of a multi-dimensional coordinate (row-major).
    pub fn index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        let mut idx = 0;
        for (c, d) in coords.iter().zip(&self.shape) {
            debug_assert!(c < d);
            idx = idx * d + c;
        }
        idx
    }

    pub fn at(&self, coords: &[usize]) -> T {
        self.data[self.index(coords)]
    }

    pub fn set(&mut self, coords: &[usize], value: T) {
        let i = self.index(coords);
        self.data[i] = value;
    }

    /// Write in `.btnsr` format.
    pub fn write(&self, path: &Path) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(
            MAGIC.len() + 2 + 8 * self.shape.len() + self.data.len() * T::byte_width(),
        );
        buf.extend_from_slice(&MAGIC);
        buf.push(T::DTYPE as u8);
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        T::append_le(&mut buf, &self.data);
        buf
    }

    /// Read a file and require this element type.
    pub fn read(path: &Path) -> Result<Self, TensorError> {
        T::extract(read_tensor(path)?)
    }
}

impl Tensor<u8> {
    /// Lossless widening to f32, preserving shape.
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(TensorError::BadNdim(shape.len()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(TensorError::BadDim(0));
        }
        n = n.checked_mul(d).ok_or(TensorError::BadDim(d as u64))?;
    }
    Ok(n)
}

/// A tensor of either supported dtype, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::U8(_) => Dtype::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

/// Read any `.btnsr` file, validating magic, dtype code, ndim, and dims.
pub fn read_tensor(path: &Path) -> Result<AnyTensor, TensorError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Write a tensor of either dtype.
pub fn write_tensor<T: Element>(tensor: &Tensor<T>, path: &Path) -> Result<(), TensorError> {
    tensor.write(path)
}

pub fn from_bytes(bytes: &[u8]) -> Result<AnyTensor, TensorError> {
    if bytes.len() < MAGIC.len() + 2 {
        return Err(TensorError::BadMagic);
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let dtype = match bytes[MAGIC.len()] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        code => return Err(TensorError::UnsupportedDtype(code)),
    };
    let ndim = bytes[MAGIC.len() + 1] as usize;
    if !(1..=MAX_NDIM).contains(&ndim) {
        return Err(TensorError::BadNdim(ndim));
    }
    let header = MAGIC.len() + 2 + 8 * ndim;
    if bytes.len() < header {
        return Err(TensorError::Payload {
            expected: header,
            found: bytes.len(),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = MAGIC.len() + 2 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if d == 0 {
            return Err(TensorError::BadDim(0));
        }
        shape.push(usize::try_from(d).map_err(|_| TensorError::BadDim(d))?);
    }
    let n = checked_len(&shape)?;
    let payload = &bytes[header..];
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    if payload.len() != n * width {
        return Err(TensorError::Payload {
            expected: n * width,
            found: payload.len(),
        });
    }
    Ok(match dtype {
        Dtype::F32 => AnyTensor::F32(Tensor {
            shape,
            data: f32::from_le(payload),
        }),
        Dtype::U8 => AnyTensor::U8(Tensor {
            shape,
            data: payload.to_vec(),
        }),
    })
}
