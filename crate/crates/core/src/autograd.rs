//! Tape-based reverse-mode differentiation over a closed set of operations.
//!
//! A [`Graph`] records every forward operation in insertion order. Calling
//! [`Graph::backward`] consumes the tape, walks it in strict reverse order
//! and returns the gradients of every leaf that was registered with
//! `requires_grad`.

use crate::error::{Error, Result};
use crate::tensor::{self, log_sum_exp, softmax_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        lhs: Var,
        rhs: Var,
        transpose_rhs: bool,
    },
    /// Elementwise sum; `rhs` may be a single row broadcast over `lhs`.
    Add { lhs: Var, rhs: Var, broadcast: bool },
    ConcatLastDim { parts: Vec<Var> },
    SoftmaxLastDim { input: Var },
    Scale { input: Var, factor: f64 },
    /// Saves the tempered softmax so the backward pass is `(p - onehot) / τ`.
    CrossEntropy {
        logits: Var,
        label: usize,
        temperature: f64,
        probs: Vec<f64>,
    },
    SelectRows { input: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate errors in backward rules, used to confirm that gradient
/// checking actually catches a broken derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Drops the `-Σ dy·y` correction term from the softmax backward rule.
    SoftmaxJacobian,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the leaf did not require grad or
    /// the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zero-filled when the loss does not reach it.
    pub fn get_or_zero(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.matmul_impl(lhs, rhs, false)
    }

    /// `lhs · rhsᵀ`.
    pub fn matmul_t(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.matmul_impl(lhs, rhs, true)
    }

    fn matmul_impl(&mut self, lhs: Var, rhs: Var, transpose_rhs: bool) -> Result<Var> {
        let out = tensor::matmul(self.value(lhs), self.value(rhs), transpose_rhs)?;
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(
            out,
            Op::MatMul {
                lhs,
                rhs,
                transpose_rhs,
            },
            rg,
        ))
    }

    /// Elementwise `lhs + rhs`. A `[1 x n]` `rhs` is broadcast over every
    /// row of an `[m x n]` `lhs`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let broadcast = if a.shape() == b.shape() {
            false
        } else if a.shape().len() == 2 && b.shape() == [1, a.shape()[1]] {
            true
        } else {
            return Err(Error::dim("add", a.shape(), b.shape()));
        };
        let cols = b.shape()[b.shape().len() - 1];
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if broadcast { b.data()[i % cols] } else { b.data()[i] })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(
            out,
            Op::Add {
                lhs,
                rhs,
                broadcast,
            },
            rg,
        ))
    }

    /// Concatenate 2-D tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.dims2().0 != rows {
                return Err(Error::dim("concat", self.value(*first).shape(), v.shape()));
            }
            widths.push(v.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatLastDim {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).softmax_lastdim()?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::SoftmaxLastDim { input }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let v = self.value(input);
        let data = v.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// `-log softmax(logits / temperature)[label]` as a `[1 x 1]` tensor.
    /// `logits` must be a single row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let v = self.value(logits);
        let (rows, n) = v.dims2();
        if rows != 1 {
            return Err(Error::dim("cross_entropy", v.shape(), &[1, n]));
        }
        if label >= n {
            return Err(Error::Index {
                index: label,
                len: n,
                context: "cross_entropy label",
            });
        }
        if !v.is_finite() {
            return Err(Error::numeric("cross_entropy logits"));
        }
        let scaled: Vec<f64> = v.data().iter().map(|x| x / temperature).collect();
        let loss = tempered_nll(&scaled, label);
        let mut probs = vec![0.0; n];
        softmax_into(&scaled, &mut probs);
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::matrix(1, 1, vec![loss])?,
            Op::CrossEntropy {
                logits,
                label,
                temperature,
                probs,
            },
            rg,
        ))
    }

    /// Gather rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(input);
        let (n, cols) = v.dims2();
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    index: r,
                    len: n,
                    context: "select_rows",
                });
            }
            data.extend_from_slice(v.row_slice(r));
        }
        let out = Tensor::matrix(rows.len(), cols, data)?;
        let rg = self.needs(input);
        Ok(self.push(
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `x · W + b` with `W` stored `[in x out]` and `b` a `[1 x out]` row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add(xw, bias)
    }

    /// Single-query attention: `softmax(q·Kᵀ / scale) · V`.
    /// Returns `(output [1 x D], weights [1 x t])`.
    pub fn attention(&mut self, q: Var, keys: Var, values: Var, scale: f64) -> Result<(Var, Var)> {
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("attention scale must be positive, got {scale}")));
        }
        let (kq, kk) = (self.value(q).shape().to_vec(), self.value(keys).shape().to_vec());
        if kq.len() != 2 || kq[0] != 1 {
            return Err(Error::dim("attention query", &kq, &kk));
        }
        if self.value(keys).dims2().0 != self.value(values).dims2().0 {
            let kv = self.value(values).shape().to_vec();
            return Err(Error::dim("attention keys/values", &kk, &kv));
        }
        let scores = self.matmul_t(q, keys)?;
        let scores = self.scale(scores, 1.0 / scale);
        let weights = self.softmax(scores)?;
        let out = self.matmul(weights, values)?;
        Ok((out, weights))
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes, fault } = self;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let mut acc = |v: Var, g: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul {
                    lhs,
                    rhs,
                    transpose_rhs,
                } => {
                    let (a, b) = (&nodes[lhs.0].value, &nodes[rhs.0].value);
                    let (m, k) = a.dims2();
                    let n = node.value.dims2().1;
                    if nodes[lhs.0].requires_grad {
                        // dA = dC · Bᵀ  (or dC · B when C = A · Bᵀ)
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    let bv = if *transpose_rhs {
                                        b.data()[j * k + l]
                                    } else {
                                        b.data()[l * n + j]
                                    };
                                    s += gout[i * n + j] * bv;
                                }
                                ga[i * k + l] = s;
                            }
                        }
                        acc(*lhs, ga);
                    }
                    if nodes[rhs.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for l in 0..k {
                                let av = a.data()[i * k + l];
                                for j in 0..n {
                                    let g = gout[i * n + j] * av;
                                    if *transpose_rhs {
                                        gb[j * k + l] += g;
                                    } else {
                                        gb[l * n + j] += g;
                                    }
                                }
                            }
                        }
                        acc(*rhs, gb);
                    }
                }
                Op::Add {
                    lhs,
                    rhs,
                    broadcast,
                } => {
                    if *broadcast {
                        let cols = nodes[rhs.0].value.len();
                        let mut gb = vec![0.0; cols];
                        for (i, g) in gout.iter().enumerate() {
                            gb[i % cols] += g;
                        }
                        acc(*rhs, gb);
                    } else {
                        acc(*rhs, gout.clone());
                    }
                    acc(*lhs, gout);
                }
                Op::ConcatLastDim { parts } => {
                    let (rows, total) = node.value.dims2();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.dims2().1;
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, gp);
                        offset += w;
                    }
                }
                Op::SoftmaxLastDim { input } => {
                    let y = node.value.data();
                    let (rows, cols) = node.value.dims2();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let inner = if fault == Some(BackwardFault::SoftmaxJacobian) {
                            0.0
                        } else {
                            tensor::dot(&gout[span.clone()], &y[span.clone()])
                        };
                        for c in span {
                            gx[c] = y[c] * (gout[c] - inner);
                        }
                    }
                    acc(*input, gx);
                }
                Op::Scale { input, factor } => {
                    acc(*input, gout.iter().map(|g| g * factor).collect());
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    temperature,
                    probs,
                } => {
                    let g = gout[0] / temperature;
                    let gl = probs
                        .iter()
                        .enumerate()
                        .map(|(i, p)| g * (p - if i == *label { 1.0 } else { 0.0 }))
                        .collect();
                    acc(*logits, gl);
                }
                Op::SelectRows { input, rows } => {
                    let cols = node.value.dims2().1;
                    let mut gi = vec![0.0; nodes[input.0].value.len()];
                    for (out_r, &src) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gi[src * cols + c] += gout[out_r * cols + c];
                        }
                    }
                    acc(*input, gi);
                }
            }
        }

        // Keep only leaf gradients; interior buffers were consumed above.
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// `-log softmax(x)[label]`, keeping full relative precision when the
/// label already dominates.
fn tempered_nll(x: &[f64], label: usize) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x[label] == max {
        let rest: f64 = x
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .map(|(_, v)| (v - max).exp())
            .sum();
        rest.ln_1p()
    } else {
        (log_sum_exp(x) - x[label]).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec()).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(x · W) for x fixed; dL/dW[i][j] = x[i].
        let mut g = Graph::new();
        let x = g.constant(row(&[1.0, -2.0, 0.5]));
        let w = g.param(Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let ones = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let loss = g.matmul(y, ones).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn disconnected_param_gets_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(row(&[1.0, 2.0]));
        let x = g.param(row(&[3.0]));
        let loss = g.scale(x, 2.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get_or_zero(p, 2), vec![0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.constant(row(&[0.3, 0.3, 0.3, 0.3]));
        let ce = g.cross_entropy(l, 2, 0.05).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);

        let l2 = g.constant(row(&[1.0, 0.0]));
        let ce2 = g.cross_entropy(l2, 0, 0.05).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((g.value(ce2).data()[0] - expected).abs() < 1e-12 * expected);

        let l3 = g.constant(row(&[7.0]));
        let ce3 = g.cross_entropy(l3, 0, 1.0).unwrap();
        assert_eq!(g.value(ce3).data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let l = g.constant(row(&[0.0, 1.0]));
        assert!(matches!(g.cross_entropy(l, 2, 1.0), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_tempered_residual() {
        let logits = [0.2, -0.1, 0.4];
        let tau = 0.5;
        let mut g = Graph::new();
        let l = g.param(row(&logits));
        let ce = g.cross_entropy(l, 1, tau).unwrap();
        let grads = g.backward(ce).unwrap();
        let mut p = [0.0; 3];
        let scaled: Vec<f64> = logits.iter().map(|x| x / tau).collect();
        softmax_into(&scaled, &mut p);
        for (i, gi) in grads.get(l).unwrap().iter().enumerate() {
            let expected = (p[i] - if i == 1 { 1.0 } else { 0.0 }) / tau;
            assert!((gi - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, 2.0]));
        let y = g.scale(x, 3.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_single_key_and_symmetric_keys() {
        let mut g = Graph::new();
        let q = g.constant(row(&[0.3, -0.7]));
        let k = g.constant(row(&[1.0, 2.0]));
        let v = g.constant(row(&[4.0, 5.0, 6.0]));
        let (out, w) = g.attention(q, k, v, 2.0).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(out).data(), &[4.0, 5.0, 6.0]);

        let k2 = g.constant(Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let v2 = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
        let (out2, _) = g.attention(q, k2, v2, 1.0).unwrap();
        assert!((g.value(out2).data()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn attention_hand_case() {
        let s = 2f64.sqrt();
        let mut g = Graph::new();
        let q = g.constant(row(&[1.0, 0.0]));
        let k = g.constant(Tensor::identity(2));
        let v = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let (out, w) = g.attention(q, k, v, s).unwrap();
        // softmax([1/√2, 0]) by hand
        let e = (1.0 / s).exp();
        let w0 = e / (e + 1.0);
        let w1 = 1.0 / (e + 1.0);
        assert!((g.value(w).data()[0] - w0).abs() < 1e-15);
        assert!((g.value(w).data()[1] - w1).abs() < 1e-15);
        assert!((g.value(out).data()[0] - 2.0 * w0).abs() < 1e-15);
        assert!((g.value(out).data()[1] - 2.0 * w1).abs() < 1e-15);
    }

    #[test]
    fn attention_key_dim_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(row(&[1.0, 0.0, 0.0]));
        let k = g.constant(Tensor::identity(2));
        let v = g.constant(Tensor::identity(2));
        assert!(matches!(g.attention(q, k, v, 1.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = x·xᵀ → grad = 2x
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, -3.0]));
        let l = g.matmul_t(x, x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -6.0]);
    }

    #[test]
    fn select_rows_scatters_back() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.select_rows(w, &[2, 0, 2]).unwrap();
        let ones = g.constant(Tensor::row(vec![1.0, 1.0, 1.0]).unwrap());
        let l = g.matmul(ones, s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 0.0, 2.0]);
    }
}
