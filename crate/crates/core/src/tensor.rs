//! Dense row-major `f32` tensors.
//!
//! Storage is 32-bit; every reduction (matrix products, sums, norms)
//! accumulates in `f64` and rounds once on the way out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    /// Standard matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_matrix("matmul")?;
        let (n2, p) = rhs.require_matrix("matmul")?;
        if n != n2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0f32; m * p];
        let mut acc = vec![0.0f64; p];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let lhs_row = &self.data[i * n..(i + 1) * n];
            for (kk, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                let rhs_row = &rhs.data[kk * p..(kk + 1) * p];
                for (slot, &b) in acc.iter_mut().zip(rhs_row) {
                    *slot += a * b as f64;
                }
            }
            for (o, a) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        let t = Tensor::from_parts(vec![m, p], out);
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    fn zip_with(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape(op, &self.shape, &rhs.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor::from_parts(self.shape.clone(), data);
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        let t = self.map(|v| v * factor);
        t.check_finite("scale")?;
        Ok(t)
    }

    /// `self + factor * rhs`, computed per element in one rounding step.
    pub fn axpy(&self, factor: f32, rhs: &Tensor) -> Result<Tensor> {
        let f = factor as f64;
        self.zip_with(rhs, "axpy", |a, b| (a as f64 + f * b as f64) as f32)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Scales every row of a matrix to unit L2 norm. `NORM_EPS` inside the
    /// square root keeps zero rows finite.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("normalize_rows", &self.shape, &[0, 0]));
        }
        let cols = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(cols.max(1)) {
            let n = row_norm(row);
            out.extend(row.iter().map(|&v| (v as f64 / n) as f32));
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Adds a length-`cols` bias vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_matrix("add_row")?;
        if bias.len() != n {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for (v, b) in data[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *v += *b;
            }
        }
        let t = Tensor::from_parts(self.shape.clone(), data);
        t.check_finite("add_row")?;
        Ok(t)
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Usage(format!("row {i} out of range for {m} rows")));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor::from_parts(vec![idx.len(), n], data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Sum of absolute differences to `rhs`, accumulated in `f64`.
    pub fn l1_distance(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::shape("l1_distance", &self.shape, &rhs.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum())
    }

    pub fn bit_eq(&self, rhs: &Tensor) -> bool {
        self.shape == rhs.shape
            && self
                .data
                .iter()
                .zip(&rhs.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Free-function form of [`Tensor::matmul`].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub const NORM_EPS: f64 = 1e-12;

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    (row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + NORM_EPS).sqrt()
}
