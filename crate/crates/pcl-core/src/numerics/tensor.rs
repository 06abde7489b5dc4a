use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use super::{NumericsError, Result};

/// Floating-point scalar the numeric core is generic over.
///
/// Randomness and configuration literals are drawn in `f64` and converted,
/// so an `f64` instantiation is bit-identical to the direct computation.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + 'static
{
    /// Converts an `f64` literal; lossless for `f64`, rounded for `f32`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor value. Rank 0 (scalar), 1 (vector) and 2 (matrix)
/// are the only ranks the operations here accept.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![F::zero(); numel] }
    }

    /// Standard-normal entries, drawn in `f64` then converted.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        use rand_distr::StandardNormal;
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`, drawn in `f64` then converted.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::lit(rng.gen_range(lo..hi))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Element access for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.cols() + j]
    }

    /// Row slice for rank-2 tensors.
    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Host-side matrix product, used for detached masks and diagnostics.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(NumericsError::Dimension(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + a * other.data[p * n + j];
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Host-side row softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(NumericsError::Dimension(format!(
                "softmax_rows on rank {}",
                self.rank()
            )));
        }
        let (n, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); n * c];
        for i in 0..n {
            let row = self.row(i);
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        Tensor::matrix(n, c, out)
    }

    /// Index of the largest entry per row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Largest entry per row.
    pub fn max_rows(&self) -> Vec<F> {
        (0..self.rows())
            .map(|i| self.row(i).iter().cloned().fold(F::neg_infinity(), F::max))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }
}
