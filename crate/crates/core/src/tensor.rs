//! Small dense containers used by the scoring pipeline.

use crate::error::{Error, Result};

/// Row-major rank-3 tensor, `[heads, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Tensor3<T> {
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::shape(format!(
                "tensor {dims:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, h: usize, r: usize, c: usize) -> T {
        self.data[(h * self.dims[1] + r) * self.dims[2] + c]
    }

    /// The contiguous `[cols]` slice at `(h, r)`.
    #[inline]
    pub fn row(&self, h: usize, r: usize) -> &[T] {
        let start = (h * self.dims[1] + r) * self.dims[2];
        &self.data[start..start + self.dims[2]]
    }

    #[inline]
    pub fn row_mut(&mut self, h: usize, r: usize) -> &mut [T] {
        let start = (h * self.dims[1] + r) * self.dims[2];
        let cols = self.dims[2];
        &mut self.data[start..start + cols]
    }
}

/// Per-head rows of equal length (`heads × len`), no sign constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    heads: usize,
    len: usize,
    data: Vec<f64>,
}

impl Rows {
    pub fn from_vec(heads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * len {
            return Err(Error::shape(format!(
                "rows {heads}x{len} need {} values, got {}",
                heads * len,
                data.len()
            )));
        }
        Ok(Self { heads, len, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let heads = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            heads,
            len,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn zeros(heads: usize, len: usize) -> Self {
        Self {
            heads,
            len,
            data: vec![0.0; heads * len],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, h: usize) -> &[f64] {
        &self.data[h * self.len..(h + 1) * self.len]
    }

    #[inline]
    pub fn row_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.data[h * self.len..(h + 1) * self.len]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.heads).map(|h| self.row(h).to_vec()).collect()
    }

    pub(crate) fn same_shape(&self, other: &Rows) -> Result<()> {
        if self.heads != other.heads || self.len != other.len {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.heads, self.len, other.heads, other.len
            )));
        }
        Ok(())
    }
}
