//! Minimal dense row-major tensor.

use crate::error::{Error, Result};

/// Element dtype tag as stored in the model file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    I32 = 2,
}

/// Payload types a [`Tensor`] may carry.
pub trait Element: Copy + PartialEq + std::fmt::Debug + 'static {
    const DTYPE: DType;
    const BYTE_SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const BYTE_SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for i8 {
    const DTYPE: DType = DType::I8;
    const BYTE_SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

impl Element for i32 {
    const DTYPE: DType = DType::I32;
    const BYTE_SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

/// Dense row-major numeric array with shape. All dimensions are at least 1 and
/// `data.len()` always equals the product of the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ZeroDim { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ZeroDim { shape });
        }
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    /// 1-D tensor from a flat vector.
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    context: "from_rows",
                    axis: "columns",
                    expected: c,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Element of a 2-D tensor at `[r, c]`.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Element of a 3-D tensor at `[a, b, c]`.
    #[inline]
    pub fn at3(&self, a: usize, b: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        self.data[(a * self.shape[1] + b) * self.shape[2] + c]
    }

    pub(crate) fn expect_rank(&self, context: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank {
                context,
                expected: rank,
                actual: self.rank(),
            });
        }
        Ok(())
    }
}
