//! Dense row-major `f64` tensors.
//!
//! Image-like tensors use NCHW layout. Everything the training code needs
//! lives here or in [`crate::autograd`]; there is no device abstraction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_shape, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch. For internal
    /// call sites where the length is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per batch entry.
    pub fn per_item(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::InvalidArgument(format!(
                "expected a 4-d tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                got: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_shape(&self.shape, &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        ensure_shape(&self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        ensure_shape(&self.shape, &other.shape)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Entry `i` along the batch axis, keeping a batch dim of 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        self.batch_range(i, i + 1)
    }

    pub fn batch_range(&self, start: usize, end: usize) -> Result<Self> {
        let b = self.batch();
        if start > end || end > b {
            return Err(Error::OutOfRange {
                what: "batch",
                index: end,
                len: b,
            });
        }
        let per = self.per_item();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Concatenate along the batch axis.
    pub fn concat_batch(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut b = 0;
        for t in items {
            ensure_shape(&first.shape[1..], &t.shape[1..])?;
            b += t.batch();
            data.extend_from_slice(&t.data);
        }
        shape[0] = b;
        Ok(Self { shape, data })
    }

    /// Gather batch entries by index.
    pub fn gather_batch(&self, idx: &[usize]) -> Result<Self> {
        let per = self.per_item();
        let b = self.batch();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= b {
                return Err(Error::OutOfRange {
                    what: "batch",
                    index: i,
                    len: b,
                });
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    /// Repeat a batch-1 tensor `n` times.
    pub fn repeat_batch(&self, n: usize) -> Result<Self> {
        if self.batch() != 1 {
            return Err(Error::InvalidArgument(format!(
                "repeat_batch expects batch 1, got {}",
                self.batch()
            )));
        }
        let mut data = Vec::with_capacity(self.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        let mut shape = self.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Self> {
        let (ba, ca, ha, wa) = a.dims4()?;
        let (bb, cb, hb, wb) = b.dims4()?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                expected: vec![ba, cb, ha, wa],
                got: b.shape.clone(),
            });
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..ba {
            data.extend_from_slice(&a.data[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&b.data[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(Self {
            shape: vec![ba, ca + cb, ha, wa],
            data,
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|x| x.clamp(lo, hi))
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Stored shapes: a is (m,k) or (k,m); b is (k,n) or (n,k).
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
