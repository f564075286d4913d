use std::collections::HashMap;

use super::{logsumexp_row, matmul_at_b_into, matmul_into, sigmoid, softmax_row, softplus, Tensor};
use crate::error::{invalid, FincastError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Softmax(usize),
    LogSumExp(usize),
    MeanLast(usize),
    MeanRows(usize),
    Sum(usize),
    WeightedSum(usize, Vec<f64>),
    Softplus(usize),
    Silu(usize),
    Sqrt(usize),
    Square(usize),
    Sin(usize),
    Gather(usize, Vec<usize>),
    Scatter(usize, Vec<usize>),
    Concat(Vec<usize>),
    Reshape(usize),
    Huber {
        a: usize,
        target: Vec<f64>,
        delta: f64,
    },
    Pinball {
        a: usize,
        target: Vec<f64>,
        q: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
    requires_grad: bool,
}

/// A single-writer record of forward operations. Rebuilt every step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branch_sig: u64,
}

/// Gradients keyed by parameter index.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    /// Gradient of `param`, or zeros of `shape` when it never reached the loss.
    pub fn get_or_zeros(&self, param: usize, shape: &[usize]) -> Tensor {
        self.by_param
            .get(&param)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> FincastError {
    FincastError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], len: usize, idx: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_sig: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of every discrete decision (loss branches, expert selections)
    /// taken while building this tape. Two evaluations with equal signatures
    /// lie on the same smooth piece of the objective.
    pub fn branch_signature(&self) -> u64 {
        self.branch_sig
    }

    pub fn note_branch(&mut self, decisions: impl IntoIterator<Item = u64>) {
        for d in decisions {
            for byte in d.to_le_bytes() {
                self.branch_sig ^= u64::from(byte);
                self.branch_sig = self.branch_sig.wrapping_mul(FNV_PRIME);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked parameter leaf.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, 1, m, k, n, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch: 1,
                m,
                k,
                n,
                trans_b: false,
            },
            &[a.0, b.0],
        ))
    }

    /// Batched product over 3-D operands: `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", av, bv));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(shape_err("bmm", av, bv));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(shape_err("bmm", av, bv));
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        matmul_into(av.data(), bv.data(), &mut out, batch, m, k, n, trans_b);
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push(value, op, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    /// Broadcast a vector over the last axis: `a[..., j] op r[j]`.
    fn row_op(
        &mut self,
        name: &'static str,
        a: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[r.0].value);
        let d = av.last_dim();
        if rv.numel() != d || av.shape().is_empty() {
            return Err(shape_err(name, av, rv));
        }
        let data = av
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(rv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op, &[a.0, r.0]))
    }

    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_op("add_row", a, r, |x, y| x + y, Op::AddRow(a.0, r.0))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_op("mul_row", a, r, |x, y| x * y, Op::MulRow(a.0, r.0))
    }

    /// One scalar per row (everything but the last axis): `a[i, j] op c[i]`.
    fn col_op(
        &mut self,
        name: &'static str,
        a: Var,
        c: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[c.0].value);
        let d = av.last_dim();
        if av.shape().is_empty() || cv.numel() * d != av.numel() {
            return Err(shape_err(name, av, cv));
        }
        let data = av
            .data()
            .chunks(d)
            .zip(cv.data())
            .flat_map(|(row, &s)| {
                let f = &f;
                row.iter().map(move |&x| f(x, s))
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op, &[a.0, c.0]))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("mul_col", a, c, |x, s| x * s, Op::MulCol(a.0, c.0))
    }

    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("div_col", a, c, |x, s| x / s, Op::DivCol(a.0, c.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let mut out = vec![0.0; av.numel()];
        for (row, o) in av.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: out,
        };
        self.push(value, Op::Softmax(a.0), &[a.0])
    }

    /// `log Σ exp` over the last axis; drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let data: Vec<f64> = av.data().chunks(d).map(logsumexp_row).collect();
        let shape = av.shape()[..av.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor { shape, data };
        self.push(value, Op::LogSumExp(a.0), &[a.0])
    }

    /// Mean over the last axis; drops that axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let data: Vec<f64> = av
            .data()
            .chunks(d)
            .map(|r| r.iter().sum::<f64>() / d as f64)
            .collect();
        let shape = av.shape()[..av.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor { shape, data };
        self.push(value, Op::MeanLast(a.0), &[a.0])
    }

    /// Mean over all rows of a `[rows, d]` view: returns `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let rows = av.numel() / d.max(1);
        let mut out = vec![0.0; d];
        for row in av.data().chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= rows.max(1) as f64;
        }
        let value = Tensor::from_vec(out);
        self.push(value, Op::MeanRows(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    /// `Σ w_i a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if weights.len() != av.numel() {
            return Err(FincastError::Shape {
                op: "weighted_sum",
                left: av.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = av.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a.0, weights), &[a.0]))
    }

    /// `out[i] = a[index[i]]` (flat indexing), reshaped to `shape`. Covers
    /// reshapes with permutation, row selection and masked selection.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if index.len() != shape.iter().product::<usize>() {
            return Err(FincastError::Shape {
                op: "gather",
                left: vec![index.len()],
                right: shape.to_vec(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= av.numel()) {
            return invalid(format!(
                "gather index {bad} out of range for {:?}",
                av.shape()
            ));
        }
        let data = index.iter().map(|&i| av.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather(a.0, index), &[a.0]))
    }

    /// `out[index[i]] += a[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if index.len() != av.numel() {
            return Err(FincastError::Shape {
                op: "scatter_add",
                left: av.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return invalid(format!("scatter index {bad} out of range for {shape:?}"));
        }
        let mut out = vec![0.0; n];
        for (&i, &x) in index.iter().zip(av.data()) {
            out[i] += x;
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Scatter(a.0, index), &[a.0]))
    }

    /// Concatenate flattened inputs along the leading axis. All inputs must
    /// agree on trailing dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of zero tensors");
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.is_empty() {
            return invalid("concat of scalars");
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != first.len() || v.shape()[1..] != first[1..] {
                return Err(FincastError::Shape {
                    op: "concat",
                    left: first,
                    right: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat(ids.clone()), &ids))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    /// Elementwise Huber loss terms against a constant target.
    pub fn huber(&mut self, a: Var, target: Vec<f64>, delta: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if target.len() != av.numel() {
            return Err(FincastError::Shape {
                op: "huber",
                left: av.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| crate::loss::huber_term(p - y, delta))
            .collect();
        let bits: Vec<u64> = av
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| u64::from((p - y).abs() <= delta) + 2 * u64::from(p >= y))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.note_branch(bits);
        Ok(self.push(
            value,
            Op::Huber {
                a: a.0,
                target,
                delta,
            },
            &[a.0],
        ))
    }

    /// Elementwise pinball loss terms with per-element quantile levels.
    pub fn pinball(&mut self, a: Var, target: Vec<f64>, q: Vec<f64>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if target.len() != av.numel() || q.len() != av.numel() {
            return Err(FincastError::Shape {
                op: "pinball",
                left: av.shape().to_vec(),
                right: vec![target.len(), q.len()],
            });
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(&target)
            .zip(&q)
            .map(|((&p, &y), &q)| crate::loss::pinball_term(p, y, q))
            .collect();
        let bits: Vec<u64> = av
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| u64::from(y >= p))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.note_branch(bits);
        Ok(self.push(value, Op::Pinball { a: a.0, target, q }, &[a.0]))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf on the tape
    /// receives an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let val = |i: usize| self.nodes[i].value.data();
            let len = |i: usize| self.nodes[i].value.numel();
            let need = |i: usize| self.nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    if need(a) {
                        // dA = dC · Bᵀ (or dC · B when B was transposed)
                        let ga = accumulate(&mut grads, len(a), a);
                        if trans_b {
                            matmul_into(&g, val(b), ga, batch, m, n, k, false);
                        } else {
                            matmul_into(&g, val(b), ga, batch, m, n, k, true);
                        }
                    }
                    if need(b) {
                        let gb = accumulate(&mut grads, len(b), b);
                        if trans_b {
                            // B is n×k: dB = dCᵀ · A
                            matmul_at_b_into(&g, val(a), gb, batch, m, n, k);
                        } else {
                            matmul_at_b_into(val(a), &g, gb, batch, m, k, n);
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for i in [a, b] {
                        if need(i) {
                            let gi = accumulate(&mut grads, len(i), i);
                            gi.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    if need(a) {
                        let ga = accumulate(&mut grads, len(a), a);
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if need(b) {
                        let gb = accumulate(&mut grads, len(b), b);
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                &Op::Mul(a, b) => {
                    if need(a) {
                        let bv = val(b);
                        let ga = accumulate(&mut grads, len(a), a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if need(b) {
                        let av = val(a);
                        let gb = accumulate(&mut grads, len(b), b);
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                &Op::Scale(a, c) => {
                    let ga = accumulate(&mut grads, len(a), a);
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
                &Op::AddScalar(a) | &Op::Reshape(a) => {
                    let ga = accumulate(&mut grads, len(a), a);
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                &Op::AddRow(a, r) => {
                    let d = len(r);
                    if need(a) {
                        let ga = accumulate(&mut grads, len(a), a);
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if need(r) {
                        let gr = accumulate(&mut grads, d, r);
                        for row in g.chunks(d) {
                            gr.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                &Op::MulRow(a, r) => {
                    let d = len(r);
                    if need(a) {
                        let rv = val(r);
                        let ga = accumulate(&mut grads, len(a), a);
                        for (grow, gi) in ga.chunks_mut(d).zip(g.chunks(d)) {
                            for j in 0..d {
                                grow[j] += gi[j] * rv[j];
                            }
                        }
                    }
                    if need(r) {
                        let av = val(a);
                        let gr = accumulate(&mut grads, d, r);
                        for (arow, gi) in av.chunks(d).zip(g.chunks(d)) {
                            for j in 0..d {
                                gr[j] += gi[j] * arow[j];
                            }
                        }
                    }
                }
                &Op::MulCol(a, c) => {
                    let d = out.last_dim();
                    if need(a) {
                        let cv = val(c);
                        let ga = accumulate(&mut grads, len(a), a);
                        for ((grow, gi), &s) in ga.chunks_mut(d).zip(g.chunks(d)).zip(cv) {
                            grow.iter_mut().zip(gi).for_each(|(x, y)| *x += y * s);
                        }
                    }
                    if need(c) {
                        let av = val(a);
                        let gc = accumulate(&mut grads, len(c), c);
                        for ((arow, gi), gs) in av.chunks(d).zip(g.chunks(d)).zip(gc.iter_mut()) {
                            *gs += arow.iter().zip(gi).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                &Op::DivCol(a, c) => {
                    let d = out.last_dim();
                    let cv = val(c);
                    if need(a) {
                        let ga = accumulate(&mut grads, len(a), a);
                        for ((grow, gi), &s) in ga.chunks_mut(d).zip(g.chunks(d)).zip(cv) {
                            grow.iter_mut().zip(gi).for_each(|(x, y)| *x += y / s);
                        }
                    }
                    if need(c) {
                        // d(a/c)/dc = -out / c
                        let gc = accumulate(&mut grads, len(c), c);
                        for (((orow, gi), gs), &s) in out
                            .data()
                            .chunks(d)
                            .zip(g.chunks(d))
                            .zip(gc.iter_mut())
                            .zip(cv)
                        {
                            *gs -= orow.iter().zip(gi).map(|(o, y)| o * y).sum::<f64>() / s;
                        }
                    }
                }
                &Op::Softmax(a) => {
                    let d = out.last_dim();
                    let ga = accumulate(&mut grads, len(a), a);
                    for ((grow, gi), yi) in
                        ga.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d))
                    {
                        let dot: f64 = gi.iter().zip(yi).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            grow[j] += yi[j] * (gi[j] - dot);
                        }
                    }
                }
                &Op::LogSumExp(a) => {
                    let av = val(a);
                    let d = self.nodes[a].value.last_dim();
                    let ga = accumulate(&mut grads, av.len(), a);
                    for (((grow, arow), &gi), &lse) in
                        ga.chunks_mut(d).zip(av.chunks(d)).zip(&g).zip(out.data())
                    {
                        for j in 0..d {
                            grow[j] += gi * (arow[j] - lse).exp();
                        }
                    }
                }
                &Op::MeanLast(a) => {
                    let d = self.nodes[a].value.last_dim();
                    let ga = accumulate(&mut grads, len(a), a);
                    for (grow, &gi) in ga.chunks_mut(d).zip(&g) {
                        grow.iter_mut().for_each(|x| *x += gi / d as f64);
                    }
                }
                &Op::MeanRows(a) => {
                    let d = out.numel();
                    let rows = (len(a) / d.max(1)).max(1) as f64;
                    let ga = accumulate(&mut grads, len(a), a);
                    for grow in ga.chunks_mut(d) {
                        grow.iter_mut().zip(&g).for_each(|(x, y)| *x += y / rows);
                    }
                }
                &Op::Sum(a) => {
                    let ga = accumulate(&mut grads, len(a), a);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::WeightedSum(a, w) => {
                    let ga = accumulate(&mut grads, len(*a), *a);
                    ga.iter_mut().zip(w).for_each(|(x, wi)| *x += g[0] * wi);
                }
                &Op::Softplus(a) => {
                    let av = val(a);
                    let ga = accumulate(&mut grads, av.len(), a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(av[i]);
                    }
                }
                &Op::Silu(a) => {
                    let av = val(a);
                    let ga = accumulate(&mut grads, av.len(), a);
                    for i in 0..g.len() {
                        let s = sigmoid(av[i]);
                        ga[i] += g[i] * (s + av[i] * s * (1.0 - s));
                    }
                }
                &Op::Sqrt(a) => {
                    let ga = accumulate(&mut grads, len(a), a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * 0.5 / out.data()[i];
                    }
                }
                &Op::Square(a) => {
                    let av = val(a);
                    let ga = accumulate(&mut grads, av.len(), a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * 2.0 * av[i];
                    }
                }
                &Op::Sin(a) => {
                    let av = val(a);
                    let ga = accumulate(&mut grads, av.len(), a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * av[i].cos();
                    }
                }
                Op::Gather(a, index) => {
                    let ga = accumulate(&mut grads, len(*a), *a);
                    for (&i, &gi) in index.iter().zip(&g) {
                        ga[i] += gi;
                    }
                }
                Op::Scatter(a, index) => {
                    let ga = accumulate(&mut grads, len(*a), *a);
                    for (x, &i) in ga.iter_mut().zip(index) {
                        *x += g[i];
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = len(p);
                        if need(p) {
                            let gp = accumulate(&mut grads, n, p);
                            gp.iter_mut()
                                .zip(&g[offset..offset + n])
                                .for_each(|(x, y)| *x += y);
                        }
                        offset += n;
                    }
                }
                Op::Huber { a, target, delta } => {
                    let av = val(*a);
                    let ga = accumulate(&mut grads, av.len(), *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * crate::loss::huber_slope(av[i] - target[i], *delta);
                    }
                }
                Op::Pinball { a, target, q } => {
                    let av = val(*a);
                    let ga = accumulate(&mut grads, av.len(), *a);
                    for i in 0..g.len() {
                        // y >= ŷ: loss q(y-ŷ), slope -q; else (1-q)(ŷ-y), slope 1-q
                        let slope = if target[i] >= av[i] {
                            -q[i]
                        } else {
                            1.0 - q[i]
                        };
                        ga[i] += g[i] * slope;
                    }
                }
            }
        }

        let mut by_param = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(p) = node.param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let t = Tensor::new(node.value.shape(), g)?;
                match by_param.get_mut(&p) {
                    None => {
                        by_param.insert(p, t);
                    }
                    Some(existing) => {
                        let e: &mut Tensor = existing;
                        e.data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        for node in &self.nodes[loss.0 + 1..] {
            if let Some(p) = node.param {
                by_param
                    .entry(p)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_param })
    }
}
