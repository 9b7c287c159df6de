//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: shape plus data. Gradient bookkeeping lives
//! on the [`Tape`](crate::tape::Tape), which records operations over tensors
//! and hands back gradients after a backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
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
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `m × n` matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![m, n],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![m, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples every entry from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Returns `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap_or(&1);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        softmax_axis(&mut out, outer, len, inner);
        Tensor::new(self.shape.clone(), out)
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "axis",
            index: axis,
            bound: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_axis(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let max = (0..len)
                .map(|i| data[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..len {
                let e = (data[idx(i)] - max).exp();
                data[idx(i)] = e;
                sum += e;
            }
            for i in 0..len {
                data[idx(i)] /= sum;
            }
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`. Each output element
/// accumulates over `k` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}
