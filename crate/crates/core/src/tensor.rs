//! Dense row-major tensors of `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient slot.
///
/// `product(shape) == data.len()` always holds; the gradient, when present,
/// has one entry per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {n} entries, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    /// Builds an `rows × cols` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("Tensor::matrix", "ragged rows"));
        }
        Tensor::new(vec![m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Rows and length of the last axis, treating every leading axis as a row index.
    pub(crate) fn last_axis_rows(&self) -> (usize, usize) {
        let n = self.shape.last().copied().unwrap_or(1);
        let rows = self.data.len().checked_div(n).unwrap_or(0);
        (rows, n)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &other.data, m, k, n),
            grad: None,
        })
    }

    /// `A·x` for a matrix and a flat vector.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, n) = self.dims2("matvec")?;
        if n != x.len() {
            return Err(Error::dim(
                "matvec",
                format!("matrix has {n} columns, vector has {} entries", x.len()),
            ));
        }
        Ok((0..m)
            .map(|i| crate::vecmath::dot(&self.data[i * n..(i + 1) * n], x))
            .collect())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        match self.dims2("is_symmetric") {
            Ok((m, n)) if m == n => (0..n).all(|i| {
                (0..i).all(|j| (self.at(i, j) - self.at(j, i)).abs() <= tol * (1.0 + self.at(i, j).abs()))
            }),
            _ => false,
        }
    }

    pub fn norm(&self) -> f64 {
        crate::vecmath::norm(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        crate::vecmath::all_finite(&self.data)
    }
}

/// Row-major `m×k · k×n` product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ·b` for row-major `a: k×m`, `b: k×n`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
    out
}

/// `a·bᵀ` for row-major `a: m×k`, `b: n×k`.
///
/// Transposes `b` and reuses the row-axpy kernel; same summation order as a
/// per-entry dot product, but vectorisable.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_raw(a, &bt, m, k, n)
}
