//! Dense row-major `f64` tensors and the numerical kernels shared by the tape
//! and by the plain (non-differentiated) code paths.

use crate::error::{Error, Result};

/// Norms at or below this value are rejected by [`Tensor::l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Variance stabilizer used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A dense n-dimensional array of `f64` in row-major order.
///
/// Every dimension is positive, `data.len()` equals the product of the shape
/// and every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", "positive dimensions", format!("{shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("{numel} values for shape {shape:?}"),
                data.len(),
            ));
        }
        ensure_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized shape {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "rows of equal length", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer. Callers are responsible for keeping the
    /// values finite; optimizers re-check after every update.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as a matrix over the trailing axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{} values", self.data.len()),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, "rank-2 tensor", format!("{:?}", self.shape))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        Ok(Tensor::from_parts(vec![c, r], transpose(&self.data, r, c)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimension {k}"), k2));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| x.max(0.0)).collect())
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax(&self) -> Tensor {
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols()) {
            softmax_in_place(row);
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    /// Scales every row (trailing axis) to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols()) {
            let n = checked_norm("l2_normalize", row)?;
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Layer normalization over the trailing axis with population variance and
    /// [`LAYER_NORM_EPS`].
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = self.cols();
        if d < 2 {
            return Err(Error::dim("layer_norm", "width >= 2", d));
        }
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::dim("layer_norm", format!("affine width {d}"), gamma.numel()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let (mean, inv_std) = moments(row);
            for (i, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv_std * gamma.data[i] + beta.data[i];
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean norm, rejecting vectors whose norm is at most [`NORMALIZE_EPS`].
pub fn checked_norm(op: &'static str, a: &[f64]) -> Result<f64> {
    let n = norm(a);
    if n > NORMALIZE_EPS {
        Ok(n)
    } else {
        Err(Error::DegenerateInput {
            op,
            norm: n,
            eps: NORMALIZE_EPS,
        })
    }
}

/// Cosine of the angle between two non-degenerate vectors, clamped to [-1, 1].
pub fn cosine(op: &'static str, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a.len(), b.len()));
    }
    let na = checked_norm(op, a)?;
    let nb = checked_norm(op, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Mean and `1 / sqrt(var + eps)` of a row, population variance.
pub(crate) fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_into(a, &bt, out, m, k, n);
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
