use std::fmt;

use crate::error::{shape_err, Result};

/// Dense row-major array of `f64`.
///
/// Rank is unrestricted for storage, but every compute kernel works on the
/// 2-D view returned by [`Array::rows`] / [`Array::cols`]: a rank-1 array of
/// length `n` is a `1 x n` row and a rank-0 array is `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Array::new",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Rank-2 array; panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Self { shape: vec![rows, cols], data }
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("Array::from_rows", format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self::matrix(rows.len(), cols, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            r => self.shape[r - 1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("Array::reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

/// Raw kernels shared by the tape and the tape-free inference path, so both
/// produce bitwise identical values.
pub(crate) mod kernels {
    /// `out[r][i] = sum_j x[r][j] * w[i][j]` for `x: rows x n`, `w: m x n`.
    pub fn matmul_t(x: &[f64], rows: usize, n: usize, w: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let or = &mut out[r * m..(r + 1) * m];
            for (i, o) in or.iter_mut().enumerate() {
                let wi = &w[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += xr[j] * wi[j];
                }
                *o = acc;
            }
        }
        out
    }

    pub fn add_row(x: &mut [f64], b: &[f64]) {
        let m = b.len();
        for chunk in x.chunks_mut(m) {
            for (v, bb) in chunk.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }

    pub fn relu(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            0.0
        }
    }

    pub fn sigmoid(v: f64) -> f64 {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    }

    /// Softmax over the entries of `row` whose mask bit is set; masked entries get 0.
    pub fn masked_softmax(row: &[f64], mask: &[bool], out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for (v, &m) in row.iter().zip(mask) {
            if m && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for ((o, v), &m) in out.iter_mut().zip(row).zip(mask) {
            *o = if m { (v - max).exp() } else { 0.0 };
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}
