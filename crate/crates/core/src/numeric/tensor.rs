use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    DataLength { shape: Vec<usize>, expected: usize, got: usize },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Row-major dense tensor. Everything in this crate uses two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: Scalar) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![value; rows * cols] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<Scalar>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<Scalar> = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix { op, shape: self.shape.clone() }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> Scalar {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Scalar) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Scalar] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Scalar] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> Scalar {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum_sq(&self) -> Scalar {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: Scalar) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    /// Rows of `self` at `ids`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        let (r, c) = self.dims("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: r });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor { shape: vec![ids.len(), c], data })
    }

    /// `self[ids[k]] += src[k]` for every row `k` of `src`.
    pub fn scatter_add_rows(&mut self, ids: &[usize], src: &Tensor) {
        for (k, &i) in ids.iter().enumerate() {
            for (a, b) in self.row_mut(i).iter_mut().zip(src.row(k)) {
                *a += b;
            }
        }
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims("matmul")?;
        let (k2, n) = other.dims("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &self.data, k, 1, &other.data, n, 1, &mut out.data, n, 0.0);
        Ok(out)
    }
}

/// `c = a·b + beta·c` with explicit strides (`rs*`, `cs*`). `c` is row-major
/// with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    rsa: usize,
    csa: usize,
    b: &[Scalar],
    rsb: usize,
    csb: usize,
    c: &mut [Scalar],
    rsc: usize,
    beta: Scalar,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents cover every index reached
    // by the given dimensions and strides.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize,
            csb as isize, beta, c.as_mut_ptr(), rsc as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize,
            csb as isize, beta, c.as_mut_ptr(), rsc as isize, 1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    rsa: usize,
    csa: usize,
    b: &[Scalar],
    rsb: usize,
    csb: usize,
    c: &mut [Scalar],
    rsc: usize,
    beta: Scalar,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn gather_scatter() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let g = t.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[3.0, 3.0, 1.0, 1.0, 3.0, 3.0]);
        let mut z = Tensor::zeros_like(&t);
        z.scatter_add_rows(&[2, 0, 2], &g);
        assert_eq!(z.data(), &[1.0, 1.0, 0.0, 0.0, 6.0, 6.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::matrix(2, 2, vec![0.0; 3]).is_err());
        assert_eq!(Tensor::zeros(2, 3).len(), 6);
    }
}
