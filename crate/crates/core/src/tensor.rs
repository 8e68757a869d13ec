//! Dense row-major tensors.
//!
//! Only the handful of kernels the denoiser needs are provided. Binary
//! elementwise ops accept either identical shapes or a single-element
//! operand (scalar broadcast); nothing more general.

use crate::error::{dim_err, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// A zero-dimensional tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self { shape: vec![rows.len(), cols], data })
    }

    /// Builds a tensor from `f64` literals, converting to the scalar type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, other: &Self, op: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Self { shape: self.shape.clone(), data })
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            dim_err(format!("{op}: incompatible shapes {:?} and {:?}", self.shape, other.shape))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|a| a * k)
    }

    /// `self + k * other`, same shapes only.
    pub fn axpy(&self, k: S, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("axpy: shapes {:?} and {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + k * b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn silu(&self) -> Self {
        self.map(|x| x * x.sigmoid())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        self.sum() / S::of_usize(self.data.len())
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return dim_err(format!("mse: shapes {:?} and {:?}", self.shape, other.shape));
        }
        let n = S::of_usize(self.data.len().max(1));
        let total: S = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(total / n)
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        if self.data.len() != other.data.len() {
            return dim_err(format!("dot: shapes {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&a| a * a).sum::<S>().sqrt()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return dim_err(format!(
                "matmul: inner dimensions differ, {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Self { shape: vec![c, r], data })
    }

    /// Column-wise concatenation of two matrices with the same row count.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        let (r1, c1) = self.dims2()?;
        let (r2, c2) = other.dims2()?;
        if r1 != r2 {
            return dim_err(format!("concat: row counts {:?} vs {:?}", self.shape, other.shape));
        }
        let mut data = Vec::with_capacity(r1 * (c1 + c2));
        for i in 0..r1 {
            data.extend_from_slice(&self.data[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&other.data[i * c2..(i + 1) * c2]);
        }
        Ok(Self { shape: vec![r1, c1 + c2], data })
    }

    /// Splits a matrix into its first `left` columns and the remainder.
    pub fn split_cols(&self, left: usize) -> Result<(Self, Self)> {
        let (r, c) = self.dims2()?;
        if left > c {
            return dim_err(format!("split at {left} exceeds {c} columns"));
        }
        let right = c - left;
        let mut a = Vec::with_capacity(r * left);
        let mut b = Vec::with_capacity(r * right);
        for i in 0..r {
            a.extend_from_slice(&self.data[i * c..i * c + left]);
            b.extend_from_slice(&self.data[i * c + left..(i + 1) * c]);
        }
        Ok((Self { shape: vec![r, left], data: a }, Self { shape: vec![r, right], data: b }))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return dim_err(format!("bias {:?} does not match {:?}", bias.shape, self.shape));
        }
        let mut data = self.data.clone();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Per-row sums of a matrix, returned as `r x 1`.
    pub fn row_sums(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let data = (0..r).map(|i| self.data[i * c..(i + 1) * c].iter().copied().sum()).collect();
        Ok(Self { shape: vec![r, 1], data })
    }

    /// Per-column sums of a matrix, returned with shape `[c]`.
    pub fn col_sums(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = vec![S::zero(); c];
        for i in 0..r {
            for (o, &v) in data.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(Self { shape: vec![c], data })
    }

    /// Repeats an `r x 1` column across `c` columns.
    pub fn broadcast_cols(&self, c: usize) -> Result<Self> {
        let (r, one) = self.dims2()?;
        if one != 1 {
            return dim_err(format!("broadcast_cols expects r x 1, got {:?}", self.shape));
        }
        let mut data = Vec::with_capacity(r * c);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, c));
        }
        Ok(Self { shape: vec![r, c], data })
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(crate::Error::Index { index: i as i64, bound: r });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self { shape: vec![idx.len(), c], data })
    }

    /// Converts element type, e.g. `f64` to `f32`.
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect() }
    }
}
