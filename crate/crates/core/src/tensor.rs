//! Dense real-valued tensors and the float matrix products used by the
//! full-precision layers and by every backward pass.

use crate::error::{shape_err, Result};

/// Dense row-major tensor of `f64`.
///
/// Token matrices are stored as `[rows, channels]`; spatial maps as
/// `[H, W, C]`, which share the memory layout of an `(H·W) × C` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("data length {} does not match shape {:?} ({} elements)", data.len(), shape, n));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Product of all leading dimensions (the token axis).
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    /// Size of the trailing (channel) dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Same data viewed as `rows × cols`.
    pub fn as_matrix(&self) -> Self {
        Self { shape: vec![self.rows(), self.cols()], data: self.data.clone() }
    }

    pub fn require_2d(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => shape_err(format!("{what} must be 2-D, got shape {s:?}")),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `[start, end)` of the token matrix view.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self { shape: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    /// Columns `[start, end)` of the token matrix view.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self { shape: vec![r, w], data }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, block: &Self) {
        let c = self.cols();
        let w = block.cols();
        for i in 0..self.rows() {
            self.data[i * c + start..i * c + start + w].copy_from_slice(block.row(i));
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data }
    }

    /// Per-channel sum over all rows.
    pub fn col_sums(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Concatenates tensors with equal trailing shape along the row axis.
pub fn concat_rows(parts: &[FloatTensor]) -> FloatTensor {
    let c = parts.first().map_or(0, FloatTensor::cols);
    let mut data = Vec::with_capacity(parts.iter().map(FloatTensor::len).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let rows = data.len() / c.max(1);
    FloatTensor { shape: vec![rows, c], data }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> FloatTensor {
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe in-bounds views of `a` (m×k) and `b` (k×n);
        // `c` is a freshly allocated contiguous m×n buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    FloatTensor { shape: vec![m, n], data: c }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &FloatTensor, b: &FloatTensor) -> FloatTensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "matmul inner dimension");
    gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &FloatTensor, b: &FloatTensor) -> FloatTensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "matmul_tn inner dimension");
    gemm(m, k, n, a.data(), 1, m as isize, b.data(), n as isize, 1)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &FloatTensor, b: &FloatTensor) -> FloatTensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    assert_eq!(k, b.cols(), "matmul_nt inner dimension");
    gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize)
}

/// Rounds to the nearest `f32`; stored parameters live on this grid so the
/// weight container round-trips bitwise.
#[inline]
pub fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &FloatTensor, b: &FloatTensor) -> FloatTensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum();
            }
        }
        FloatTensor::matrix(m, n, out).unwrap()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = FloatTensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = FloatTensor::matrix(4, 2, (0..8).map(|v| (v as f64).sin()).collect()).unwrap();
        let want = naive(&a, &b);
        assert!(matmul(&a, &b).max_abs_diff(&want) < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).max_abs_diff(&want) < 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(FloatTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn spatial_tensor_views_as_token_matrix() {
        let t = FloatTensor::zeros(&[4, 5, 3]);
        assert_eq!((t.rows(), t.cols()), (20, 3));
    }
}
