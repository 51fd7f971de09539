//! Dense row-major `f64` tensors and the pure kernels the autograd tape
//! dispatches to.
//!
//! Every tensor the model touches is at most two-dimensional; vectors are
//! carried as `[1 x n]` rows so that the same kernels serve single samples
//! and token matrices.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `[1 x n]` row.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns of a 2-D tensor; higher ranks fold leading dims into rows.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("shape is never empty");
        (self.data.len() / cols, cols)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Single element of a one-element tensor.
    pub fn scalar(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul(self, rhs, false)
    }

    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::numeric("softmax input"));
        }
        let (rows, cols) = self.dims2();
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            softmax_into(
                &self.data[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// `a · b`, or `a · bᵀ` when `transpose_rhs` is set.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, transpose_rhs: bool) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = if transpose_rhs {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    if k != kb {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    if transpose_rhs {
        for i in 0..m {
            let ar = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(ar, br);
            }
        }
    } else {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let av = a.data[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let br = &b.data[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax of one slice.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log Σ exp(x)` with the max factored out.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
