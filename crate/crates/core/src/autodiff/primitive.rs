//! Forward and backward rules for every primitive the tape records.

use super::Tensor;
use crate::error::{Error, Result};

/// Operation kinds the tape can record.
///
/// Broadcasting is limited to [`Primitive::AddBias`] (trailing-axis bias) and
/// the scalar forms [`Primitive::Scale`] / [`Primitive::Shift`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Elementwise sum of equal shapes.
    Add,
    /// `[n, k] + [k]`, bias repeated over rows.
    AddBias,
    /// Elementwise product of equal shapes.
    Mul,
    Relu,
    Exp,
    /// Natural log, unguarded: non-positive input is a numeric error.
    Ln,
    Neg,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Shift(f64),
    /// Row-wise softmax over the trailing axis, max-subtracted.
    Softmax,
    Sigmoid,
    /// Elementwise clamp into `[lo, hi]`; gradient passes only inside.
    Clamp { lo: f64, hi: f64 },
    /// Output row `r` is input row `index[r]`.
    GatherRows(Vec<usize>),
    /// Rows `start..end`.
    SliceRows { start: usize, end: usize },
    /// Stack rank-2 inputs with equal widths.
    ConcatRows,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddBias => "add_bias",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Ln => "ln",
            Primitive::Neg => "neg",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Softmax => "softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Clamp { .. } => "clamp",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::ConcatRows => "concat_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::AddBias | Primitive::Mul => Some(2),
            Primitive::ConcatRows => None,
            _ => Some(1),
        }
    }

    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{name} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(format!("{name} needs at least one input")));
        }
        let mismatch = |a: &Tensor, b: &Tensor| Error::ShapeMismatch {
            primitive: name,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };

        let out = match self {
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(a, b));
                }
                matmul(a, b)
            }
            Primitive::Add | Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                let data = if matches!(self, Primitive::Add) {
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
                } else {
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
                };
                Tensor::new(a.shape().to_vec(), data)?
            }
            Primitive::AddBias => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(a, b));
                }
                let mut out = a.clone();
                let bias = b.data();
                for r in 0..out.rows() {
                    for (v, bv) in out.row_mut(r).iter_mut().zip(bias) {
                        *v += bv;
                    }
                }
                out
            }
            Primitive::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
            Primitive::Exp => inputs[0].map(f64::exp),
            Primitive::Ln => inputs[0].map(f64::ln),
            Primitive::Neg => inputs[0].map(|v| -v),
            Primitive::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
            Primitive::Mean => {
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(Error::invalid("mean of an empty tensor"));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            Primitive::Scale(c) => inputs[0].map(|v| v * c),
            Primitive::Shift(c) => inputs[0].map(|v| v + c),
            Primitive::Softmax => softmax_rows(inputs[0])?,
            Primitive::Sigmoid => inputs[0].map(sigmoid),
            Primitive::Clamp { lo, hi } => inputs[0].map(|v| v.clamp(*lo, *hi)),
            Primitive::GatherRows(index) => {
                let x = inputs[0];
                if x.rank() != 2 {
                    return Err(Error::invalid(format!(
                        "gather_rows needs a rank-2 input, got {:?}",
                        x.shape()
                    )));
                }
                if let Some(&bad) = index.iter().find(|&&i| i >= x.rows()) {
                    return Err(Error::invalid(format!(
                        "gather_rows index {bad} out of range for {} rows",
                        x.rows()
                    )));
                }
                x.select_rows(index)
            }
            Primitive::SliceRows { start, end } => {
                let x = inputs[0];
                if x.rank() != 2 || start > end || *end > x.rows() {
                    return Err(Error::invalid(format!(
                        "slice_rows {start}..{end} invalid for shape {:?}",
                        x.shape()
                    )));
                }
                let c = x.cols();
                Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())?
            }
            Primitive::ConcatRows => {
                let first = inputs[0];
                if first.rank() != 2 {
                    return Err(Error::invalid(format!(
                        "concat_rows needs rank-2 inputs, got {:?}",
                        first.shape()
                    )));
                }
                let mut data = Vec::new();
                let mut rows = 0;
                for x in inputs {
                    if x.rank() != 2 || x.cols() != first.cols() {
                        return Err(mismatch(first, x));
                    }
                    rows += x.rows();
                    data.extend_from_slice(x.data());
                }
                Tensor::new(vec![rows, first.cols()], data)?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { primitive: name });
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each input whose `needs` flag is set.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let zip_map = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = x.data().iter().zip(grad.data()).map(|(&a, &g)| f(a, g)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
        };
        match self {
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![
                    want(0).then(|| matmul_grad_lhs(grad, b)),
                    want(1).then(|| matmul_grad_rhs(a, grad)),
                ]
            }
            Primitive::Add => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.clone())],
            Primitive::AddBias => {
                let gb = want(1).then(|| {
                    let mut sums = vec![0.0; grad.cols()];
                    for r in 0..grad.rows() {
                        for (s, g) in sums.iter_mut().zip(grad.row(r)) {
                            *s += g;
                        }
                    }
                    Tensor::vector(sums)
                });
                vec![want(0).then(|| grad.clone()), gb]
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![
                    want(0).then(|| zip_map(b, &|bv, g| bv * g)),
                    want(1).then(|| zip_map(a, &|av, g| av * g)),
                ]
            }
            Primitive::Relu => {
                vec![Some(zip_map(inputs[0], &|x, g| if x > 0.0 { g } else { 0.0 }))]
            }
            Primitive::Exp => vec![Some(zip_map(output, &|y, g| y * g))],
            Primitive::Ln => vec![Some(zip_map(inputs[0], &|x, g| g / x))],
            Primitive::Neg => vec![Some(grad.map(|g| -g))],
            Primitive::Sum => {
                let g = grad.data()[0];
                vec![Some(Tensor::full(inputs[0].shape(), g))]
            }
            Primitive::Mean => {
                let x = inputs[0];
                let g = grad.data()[0] / x.numel() as f64;
                vec![Some(Tensor::full(x.shape(), g))]
            }
            Primitive::Scale(c) => vec![Some(grad.map(|g| g * c))],
            Primitive::Shift(_) => vec![Some(grad.clone())],
            Primitive::Softmax => {
                let mut out = grad.clone();
                for r in 0..output.rows() {
                    let y = output.row(r);
                    let dot: f64 = y.iter().zip(grad.row(r)).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in out.row_mut(r).iter_mut().zip(y.iter().zip(grad.row(r))) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(out)]
            }
            Primitive::Sigmoid => vec![Some(zip_map(output, &|y, g| g * y * (1.0 - y)))],
            Primitive::Clamp { lo, hi } => vec![Some(zip_map(inputs[0], &|x, g| {
                if x >= *lo && x <= *hi {
                    g
                } else {
                    0.0
                }
            }))],
            Primitive::GatherRows(index) => {
                let x = inputs[0];
                let mut out = Tensor::zeros(x.shape());
                for (r, &src) in index.iter().enumerate() {
                    for (o, g) in out.row_mut(src).iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                vec![Some(out)]
            }
            Primitive::SliceRows { start, end } => {
                let x = inputs[0];
                let mut out = Tensor::zeros(x.shape());
                let c = x.cols();
                out.data_mut()[start * c..end * c].copy_from_slice(grad.data());
                vec![Some(out)]
            }
            Primitive::ConcatRows => {
                let c = grad.cols();
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let n = x.numel();
                        let part = want(i).then(|| {
                            Tensor::new(vec![x.rows(), c], grad.data()[offset..offset + n].to_vec())
                                .expect("slice matches input")
                        });
                        offset += n;
                        part
                    })
                    .collect()
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

// dA = dC · Bᵀ
fn matmul_grad_lhs(grad: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (grad.shape()[0], grad.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g = grad.row(i);
        for p in 0..k {
            out[i * k + p] = g.iter().zip(&b.data()[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out).expect("matmul grad shape")
}

// dB = Aᵀ · dC
fn matmul_grad_rhs(a: &Tensor, grad: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = grad.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g = grad.row(i);
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(g) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("matmul grad shape")
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 || x.cols() == 0 {
        return Err(Error::invalid(format!(
            "softmax over an empty class axis (shape {:?})",
            x.shape()
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}
