//! Dense row-major tensors and a dynamic reverse-mode tape.
//!
//! Every differentiable forward operation lives on [`Tape`]. A fresh tape is
//! built for each training step; parameters enter it as leaves tagged with
//! their index in the parameter set so that [`Tape::backward`] can return
//! gradients keyed by parameter identity.

mod gradcheck;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_coords, grad_check_sampled, relative_error, CoordCheck, GradCheckReport,
    GRAD_FLOOR,
};
pub use tape::{Gradients, Tape, Var};

use crate::error::{FincastError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FincastError::Shape {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FincastError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[b] = a[b] · b[b]` (or `a[b] · b[b]ᵀ` when `trans_b`), batched over the
/// leading `batch` blocks. Accumulation order per output element is fixed, so
/// rows never depend on the contents of other rows.
pub(crate) fn matmul_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let out = &mut out[bi * m * n..(bi + 1) * m * n];
        if trans_b {
            for i in 0..m {
                let row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let col = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += row[p] * col[p];
                    }
                    out[i * n + j] += acc;
                }
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

/// `out[b] += a[b]ᵀ · c[b]` with `a: m×k`, `c: m×n`, `out: k×n`.
pub(crate) fn matmul_at_b_into(
    a: &[f64],
    c: &[f64],
    out: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let c = &c[bi * m * n..(bi + 1) * m * n];
        let out = &mut out[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let crow = &c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += av * cv;
                }
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn logsumexp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests;
