//! The op set shared by the autodiff tape and the shape tracer.
//!
//! Shape rules and MAC counts live here as free functions so that both
//! backends agree on them by construction.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// A backend able to evaluate (or trace) the ViT forward pass.
pub trait Ops {
    type Var: Clone;

    fn shape<'a>(&'a self, v: &'a Self::Var) -> &'a [usize];

    /// Introduces a leaf value. Gradients are tracked only when
    /// `requires_grad` is set.
    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Self::Var;

    /// `a[..,m,k] · b[..,k,n]`; `b` is either rank 2 (shared across the
    /// batch) or has the same batch extents as `a`.
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Swaps the last two axes.
    fn transpose(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn reshape(&mut self, a: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    /// `[B,T,H,D] -> [B,H,T,D]`
    fn swap_axes12(&mut self, a: &Self::Var) -> Result<Self::Var>;
    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s (broadcast).
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Elementwise product with the same broadcast rule as [`Ops::add`].
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, s: f64) -> Self::Var;
    /// GELU, tanh approximation.
    fn gelu(&mut self, a: &Self::Var) -> Self::Var;
    fn softmax(&mut self, a: &Self::Var, axis: usize) -> Result<Self::Var>;
    /// Normalizes over the last axis, then applies `gain` and `bias`.
    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gain: &Self::Var,
        bias: &Self::Var,
        eps: f64,
    ) -> Result<Self::Var>;
    /// Selects rows along axis 1 of `x[B,N,d]`. `indices` holds either one
    /// list shared by the whole batch or one list per batch element; all
    /// lists must have the same length.
    fn gather_rows(&mut self, x: &Self::Var, indices: &[Vec<usize>]) -> Result<Self::Var>;
    /// `x[B,N,d]`, `row[d]` -> `[B,N+1,d]` with `row` in slot 0.
    fn prepend_row(&mut self, x: &Self::Var, row: &Self::Var) -> Result<Self::Var>;
    fn mean_all(&mut self, a: &Self::Var) -> Self::Var;
    fn sum_all(&mut self, a: &Self::Var) -> Self::Var;
    /// Mean over the batch of `-Σ target · log softmax(logits)` with
    /// `target = (1-α)·onehot + α/K`.
    fn smoothed_cross_entropy(
        &mut self,
        logits: &Self::Var,
        labels: &[usize],
        alpha: f64,
    ) -> Result<Self::Var>;
}

pub(crate) fn matmul_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, u64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("rank < 2: {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {a:?} x {b:?}"),
        ));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    if !b_batch.is_empty() && a_batch != b_batch {
        return Err(Error::shape(
            "matmul",
            format!("batch extents differ: {a:?} x {b:?}"),
        ));
    }
    let mut out = a_batch.to_vec();
    out.extend([m, n]);
    // u64 throughout: usize is 32 bits on wasm and large configs overflow it.
    let batch: u64 = a_batch.iter().map(|&x| x as u64).product();
    Ok((out, batch * m as u64 * k as u64 * n as u64))
}

pub(crate) fn transpose_shape(a: &[usize]) -> Result<Vec<usize>> {
    if a.len() < 2 {
        return Err(Error::shape("transpose", format!("rank < 2: {a:?}")));
    }
    let mut out = a.to_vec();
    out.swap(a.len() - 2, a.len() - 1);
    Ok(out)
}

pub(crate) fn reshape_shape(a: &[usize], shape: &[usize]) -> Result<Vec<usize>> {
    let from: usize = a.iter().product();
    let to: usize = shape.iter().product();
    if from != to || shape.iter().any(|&e| e == 0) {
        return Err(Error::shape("reshape", format!("{a:?} -> {shape:?}")));
    }
    Ok(shape.to_vec())
}

pub(crate) fn swap12_shape(a: &[usize]) -> Result<Vec<usize>> {
    if a.len() != 4 {
        return Err(Error::shape(
            "swap_axes12",
            format!("expected rank 4, got {a:?}"),
        ));
    }
    Ok(vec![a[0], a[2], a[1], a[3]])
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(
            op,
            format!("{b:?} does not broadcast onto {a:?}"),
        ));
    }
    Ok(a.to_vec())
}

pub(crate) fn softmax_shape(a: &[usize], axis: usize) -> Result<Vec<usize>> {
    if axis >= a.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} for shape {a:?}"),
        ));
    }
    Ok(a.to_vec())
}

pub(crate) fn layer_norm_shape(x: &[usize], gain: &[usize], bias: &[usize]) -> Result<Vec<usize>> {
    let d = *x
        .last()
        .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
    if gain != [d] || bias != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("x {x:?}, gain {gain:?}, bias {bias:?}"),
        ));
    }
    Ok(x.to_vec())
}

pub(crate) fn gather_shape(x: &[usize], indices: &[Vec<usize>]) -> Result<Vec<usize>> {
    if x.len() != 3 {
        return Err(Error::shape(
            "gather_rows",
            format!("expected [B,N,d], got {x:?}"),
        ));
    }
    let (b, n, d) = (x[0], x[1], x[2]);
    if indices.len() != 1 && indices.len() != b {
        return Err(Error::shape(
            "gather_rows",
            format!("{} index lists for batch of {b}", indices.len()),
        ));
    }
    let k = indices[0].len();
    if k == 0 {
        return Err(Error::shape("gather_rows", "empty index list"));
    }
    let mut seen = vec![false; n];
    for list in indices {
        if list.len() != k {
            return Err(Error::shape("gather_rows", "index lists differ in length"));
        }
        seen.fill(false);
        for &i in list {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    extent: n,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateIndex(i));
            }
        }
    }
    Ok(vec![b, k, d])
}

pub(crate) fn prepend_shape(x: &[usize], row: &[usize]) -> Result<Vec<usize>> {
    if x.len() != 3 || row != [x[2]] {
        return Err(Error::shape("prepend_row", format!("x {x:?}, row {row:?}")));
    }
    Ok(vec![x[0], x[1] + 1, x[2]])
}

pub(crate) fn cross_entropy_check(logits: &[usize], labels: &[usize], alpha: f64) -> Result<()> {
    if logits.len() != 2 || logits[0] != labels.len() {
        return Err(Error::shape(
            "smoothed_cross_entropy",
            format!("logits {logits:?} for {} labels", labels.len()),
        ));
    }
    let classes = logits[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!(
            "label smoothing {alpha} outside [0, 1)"
        )));
    }
    Ok(())
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// `tanh` of the GELU inner argument, from a single `exp`. Saturates to ±1
/// instead of overflowing.
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: f64) -> f64 {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}
