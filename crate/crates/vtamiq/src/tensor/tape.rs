//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward calls record one node per operation; [`Tape::backward`] replays
//! the tape in reverse, accumulating vector-Jacobian products. The tape is
//! rebuilt per forward pass, so frozen-parameter inference from several
//! threads just builds independent tapes.

use std::collections::HashMap;

use super::kernels;
use super::params::ParameterStore;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    /// 2D matrix product.
    MatMul {
        a: Var,
        b: Var,
    },
    /// Broadcast add of a `[m]` bias over rows.
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Abs {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    /// Narrow along the last axis.
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Concatenate along the last axis.
    ConcatCols {
        parts: Vec<Var>,
    },
    /// Concatenate 2D blocks along the first axis.
    ConcatRows {
        parts: Vec<Var>,
    },
    /// Extract one row of a 2D tensor as a 1D vector.
    SelectRow {
        x: Var,
        row: usize,
    },
    /// Row lookup `table[indices[i]]`; backward scatter-adds.
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    /// 2D transpose.
    Transpose {
        x: Var,
    },
    /// Metadata-only reshape.
    Reshape {
        x: Var,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients with respect to every tape node that required them.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation. Create one per forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that participates in differentiation.
    pub fn leaf_grad(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Forward operations ──────────────────────────────────────────

    /// `A[m,k] * B[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    /// Adds a `[m]` bias to every row of `x[..., m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let m = tx.last_dim();
        if tb.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bias_data = tb.data().to_vec();
        let mut data = tx.data().to_vec();
        kernels::for_each_row(&mut data, m, |_, row| {
            for (v, &b) in row.iter_mut().zip(bias_data.iter()) {
                *v = *v + b;
            }
        });
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias { x, bias }, needs))
    }

    /// `x W + b` over the last axis, broadcasting over leading dimensions.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let x_shape = self.value(x).shape().to_vec();
        let n = *x_shape.last().expect("non-empty shape");
        let w_shape = self.value(w).shape().to_vec();
        if w_shape.len() != 2 || w_shape[0] != n {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: x_shape,
                rhs: w_shape,
            });
        }
        let m = w_shape[1];
        let rows = self.value(x).numel() / n;
        let flat = self.reshape(x, vec![rows, n])?;
        let prod = self.matmul(flat, w)?;
        let with_bias = self.add_bias(prod, b)?;
        let mut out_shape = x_shape;
        *out_shape.last_mut().expect("non-empty") = m;
        self.reshape(with_bias, out_shape)
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = kernels::zip_buf(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = kernels::zip_buf(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = kernels::zip_buf(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// Stable softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if n < 1 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: tx.shape().to_vec(),
                reason: "last axis must be non-empty".into(),
            });
        }
        let data = kernels::softmax_rows(tx.data(), n);
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x }, needs))
    }

    /// Layer normalization along the last axis: zero mean, unit variance,
    /// then the affine `gamma, beta`. Constant rows map to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if n < 2 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: tx.shape().to_vec(),
                reason: "last axis must have at least 2 elements".into(),
            });
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let data = kernels::layer_norm_rows(tx.data(), n, tg.data(), tb.data(), eps);
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    /// Tanh-approximation GELU, the model's nonlinearity.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > F::zero() { v } else { F::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let needs = self.needs(x);
        self.push(value, Op::Abs { x }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.value(x).numel() as f64);
        let s: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll { x }, needs)
    }

    /// Narrows the last axis to `[start, start+len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let width = tx.last_dim();
        if start + len > width || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: tx.shape().to_vec(),
                reason: format!("column range {start}..{} out of bounds", start + len),
            });
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let base = r * width + start;
            data.extend_from_slice(&tx.data()[base..base + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("non-empty") = len;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start, len }, needs))
    }

    /// Concatenates tensors with identical leading shape along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != rows || tp.shape()[..tp.shape().len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            widths.push(tp.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenates 2D blocks `[n_i, c]` along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let c = self.value(parts[0]).last_dim();
        let mut total_rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.last_dim() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            total_rows += tp.shape()[0];
        }
        let mut data = Vec::with_capacity(total_rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![total_rows, c], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Extracts row `row` of a 2D tensor as a `[c]` vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || row >= tx.shape()[0] {
            return Err(Error::InvalidShape {
                op: "select_row",
                shape: tx.shape().to_vec(),
                reason: format!("row {row} out of bounds"),
            });
        }
        let c = tx.shape()[1];
        let data = tx.data()[row * c..(row + 1) * c].to_vec();
        let value = Tensor::new(vec![c], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SelectRow { x, row }, needs))
    }

    /// Row lookup: `out[i] = table[indices[i]]`. Gradient scatter-adds into
    /// the table, so rows referenced twice accumulate both contributions.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: tt.shape().to_vec(),
                reason: "table must be 2D".into(),
            });
        }
        let (k, c) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Contract {
                op: "gather_rows",
                reason: format!("index {bad} out of range 0..{k}"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&tt.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: tx.shape().to_vec(),
                reason: "expected 2D".into(),
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let data = kernels::transpose(tx.data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates `d(loss)/d(node)` for every node that requires a
    /// gradient. `loss` must be scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                reason: format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].clone() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: &[F]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contrib.iter()) {
                    *e = *e + c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    // dA = dC * B^T
                    let bt = kernels::transpose(tb.data(), k, n);
                    let da = kernels::matmul(gout, &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let at = kernels::transpose(ta.data(), m, k);
                    let db = kernels::matmul(&at, gout, k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gout);
                }
                if self.needs(*bias) {
                    let m = self.value(*bias).numel();
                    let mut db = vec![F::zero(); m];
                    for row in gout.chunks(m) {
                        for (d, &g) in db.iter_mut().zip(row.iter()) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout);
                self.accumulate(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gout);
                if self.needs(*b) {
                    let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = kernels::zip_buf(gout, self.value(*b).data(), |g, y| g * y);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = kernels::zip_buf(gout, self.value(*a).data(), |g, x| g * x);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<F> = gout.iter().map(|&g| g * *c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax { x } => {
                let y = self.value(Var(i)).data();
                let n = self.value(Var(i)).last_dim();
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gout[r * n..(r + 1) * n];
                    let mut dot = F::zero();
                    for (&yv, &gv) in ys.iter().zip(gs.iter()) {
                        dot = dot + yv * gv;
                    }
                    for j in 0..n {
                        dx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let tx = self.value(*x);
                let n = tx.last_dim();
                let rows = tx.rows();
                let g = self.value(*gamma).data();
                let nf = F::from_f64(n as f64);

                let mut dx = vec![F::zero(); tx.numel()];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                for r in 0..rows {
                    let xs = &tx.data()[r * n..(r + 1) * n];
                    let gs = &gout[r * n..(r + 1) * n];
                    let (mean, var) = kernels::row_moments(xs);
                    let inv = (var + *eps).sqrt().recip();
                    // xhat, then the two resolvent means.
                    let mut mean_gg = F::zero();
                    let mut mean_ggx = F::zero();
                    let mut xhat = vec![F::zero(); n];
                    for j in 0..n {
                        xhat[j] = (xs[j] - mean) * inv;
                        let gg = gs[j] * g[j];
                        mean_gg = mean_gg + gg;
                        mean_ggx = mean_ggx + gg * xhat[j];
                    }
                    mean_gg = mean_gg / nf;
                    mean_ggx = mean_ggx / nf;
                    for j in 0..n {
                        let gg = gs[j] * g[j];
                        dx[r * n + j] = inv * (gg - mean_gg - xhat[j] * mean_ggx);
                        dgamma[j] = dgamma[j] + gs[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gs[j];
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::Gelu { x } => {
                let dx = kernels::zip_buf(gout, self.value(*x).data(), |g, v| {
                    g * kernels::gelu_grad(v)
                });
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.value(Var(i)).data();
                let dx = kernels::zip_buf(gout, y, |g, s| g * s * (F::one() - s));
                self.accumulate(grads, *x, &dx);
            }
            Op::Relu { x } => {
                let dx = kernels::zip_buf(gout, self.value(*x).data(), |g, v| {
                    if v > F::zero() {
                        g
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, *x, &dx);
            }
            Op::Abs { x } => {
                let dx = kernels::zip_buf(gout, self.value(*x).data(), |g, v| {
                    if v > F::zero() {
                        g
                    } else if v < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, *x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![gout[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::MeanAll { x } => {
                let n = F::from_f64(self.value(*x).numel() as f64);
                let dx = vec![gout[0] / n; self.value(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.value(*x);
                let width = tx.last_dim();
                let mut dx = vec![F::zero(); tx.numel()];
                for r in 0..tx.rows() {
                    for j in 0..*len {
                        dx[r * width + start + j] = gout[r * len + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatCols { parts } => {
                let rows = self.value(Var(i)).rows();
                let total = self.value(Var(i)).last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let mut dp = vec![F::zero(); self.value(p).numel()];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        self.accumulate(grads, p, &gout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SelectRow { x, row } => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let mut dx = vec![F::zero(); tx.numel()];
                dx[row * c..(row + 1) * c].copy_from_slice(gout);
                self.accumulate(grads, *x, &dx);
            }
            Op::GatherRows { table, indices } => {
                let tt = self.value(*table);
                let c = tt.shape()[1];
                let mut dt = vec![F::zero(); tt.numel()];
                for (k, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[idx * c + j] = dt[idx * c + j] + gout[k * c + j];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::Transpose { x } => {
                let ty = self.value(Var(i));
                let (r, c) = (ty.shape()[0], ty.shape()[1]);
                let dx = kernels::transpose(gout, r, c);
                self.accumulate(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, gout);
            }
        }
    }
}

/// A tape bound to a parameter store: parameters enter the graph once each
/// and gradients can be pulled back out keyed by parameter index.
pub struct Graph<'a, F: Scalar> {
    pub tape: Tape<F>,
    store: &'a ParameterStore<F>,
    bound: HashMap<usize, Var>,
}

/// Per-parameter gradients produced by [`Graph::backward`], ready to be
/// accumulated into a [`ParameterStore`].
pub struct ParamGrads<F: Scalar> {
    pub(crate) grads: Vec<(usize, Vec<F>)>,
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(store: &'a ParameterStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParameterStore<F> {
        self.store
    }

    /// Binds a named parameter into the graph (once per tape).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self.store.index_of(name).ok_or_else(|| Error::Contract {
            op: "graph_param",
            reason: format!("unknown parameter {name:?}"),
        })?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let value = self.store.by_index(idx).value().clone();
        let v = self.tape.leaf_grad(value);
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// Runs reverse accumulation from `loss` and extracts gradients for all
    /// bound parameters.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<F>> {
        let grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (&idx, &var) in &self.bound {
            if let Some(g) = grads.get(var) {
                out.push((idx, g.to_vec()));
            }
        }
        // Deterministic accumulation order.
        out.sort_by_key(|(idx, _)| *idx);
        Ok(ParamGrads { grads: out })
    }
}
