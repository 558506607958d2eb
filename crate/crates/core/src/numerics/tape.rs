//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends one node holding its forward value. Since a node can
//! only reference nodes created before it, the node order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm_nn, gemm_nt, gemm_tn, transpose};
use crate::numerics::meter;
use crate::numerics::ops::{self, Ops};
use crate::numerics::tensor::{batch_count, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SwapAxes12 {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Gelu {
        a: Var,
        tanh: Vec<f64>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        x: Var,
        indices: Vec<Vec<usize>>,
    },
    PrependRow {
        x: Var,
        row: Var,
    },
    MeanAll {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require
    /// gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = batch_count(&sa);
                let shared_b = sb.len() == 2;
                if let Some(da) = self.accumulate(grads, a) {
                    let bd = self.data(b);
                    if shared_b {
                        gemm_nt(batch * m, n, k, g, bd, da);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, b) {
                    let ad = self.data(a);
                    if shared_b {
                        gemm_tn(k, batch * m, n, ad, g, db);
                    } else {
                        for i in 0..batch {
                            gemm_tn(
                                k,
                                m,
                                n,
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                }
            }
            &Op::Transpose { a } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(da) = self.accumulate(grads, a) {
                    for (chunk, dst) in g.chunks(r * c).zip(da.chunks_mut(r * c)) {
                        for (d, t) in dst.iter_mut().zip(transpose(r, c, chunk)) {
                            *d += t;
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.accumulate(grads, a) {
                    add_into(da, g);
                }
            }
            &Op::SwapAxes12 { a } => {
                if let Some(da) = self.accumulate(grads, a) {
                    // node shape is [B,H,T,D]; swap back to [B,T,H,D]
                    let back = swap12(node.value.shape(), g);
                    add_into(da, &back);
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.accumulate(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.accumulate(grads, b) {
                    let inner = db.len();
                    for chunk in g.chunks(inner) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let inner = self.value(b).numel();
                if let Some(da) = self.accumulate(grads, a) {
                    let bd = self.data(b);
                    for (dst, gc) in da.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((d, &gi), &bi) in dst.iter_mut().zip(gc).zip(bd) {
                            *d += gi * bi;
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, b) {
                    let ad = self.data(a);
                    for (ac, gc) in ad.chunks(inner).zip(g.chunks(inner)) {
                        for ((d, &gi), &ai) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gi * ai;
                        }
                    }
                }
            }
            &Op::Scale { a, s } => {
                if let Some(da) = self.accumulate(grads, a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += s * gi;
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let x = self.data(*a);
                if let Some(da) = self.accumulate(grads, *a) {
                    for (((d, &gi), &xi), &t) in da.iter_mut().zip(g).zip(x).zip(tanh) {
                        *d += gi * ops::gelu_grad_from_tanh(xi, t);
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                if let Some(da) = self.accumulate(grads, a) {
                    if inner == 1 {
                        for ((dr, gr), yr) in
                            da.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(gj, yj)| gj * yj).sum();
                            for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += yj * (gj - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gd = self.data(*gain);
                if let Some(dx) = self.accumulate(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (row, (&rs, (gr, xr))) in
                        rstd.iter().zip(g.chunks(d).zip(xhat.chunks(d))).enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut dx[row * d..(row + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                }
                if let Some(dg) = self.accumulate(grads, *gain) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Gather { x, indices } => {
                let s = self.value(*x).shape();
                let (n, d) = (s[1], s[2]);
                let k = indices[0].len();
                if let Some(dx) = self.accumulate(grads, *x) {
                    for bi in 0..s[0] {
                        let list = if indices.len() == 1 {
                            &indices[0]
                        } else {
                            &indices[bi]
                        };
                        for (j, &src) in list.iter().enumerate() {
                            let from = &g[(bi * k + j) * d..(bi * k + j + 1) * d];
                            add_into(&mut dx[(bi * n + src) * d..(bi * n + src + 1) * d], from);
                        }
                    }
                }
            }
            &Op::PrependRow { x, row } => {
                let s = node.value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                if let Some(dx) = self.accumulate(grads, x) {
                    for bi in 0..b {
                        let src = &g[(bi * t + 1) * d..(bi + 1) * t * d];
                        add_into(&mut dx[bi * (t - 1) * d..(bi + 1) * (t - 1) * d], src);
                    }
                }
                if let Some(dr) = self.accumulate(grads, row) {
                    for bi in 0..b {
                        add_into(dr, &g[bi * t * d..(bi * t + 1) * d]);
                    }
                }
            }
            &Op::MeanAll { a } => {
                if let Some(da) = self.accumulate(grads, a) {
                    let scale = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += scale);
                }
            }
            &Op::SumAll { a } => {
                if let Some(da) = self.accumulate(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SmoothedCe {
                logits,
                targets,
                probs,
            } => {
                let batch = self.value(*logits).shape()[0] as f64;
                if let Some(dl) = self.accumulate(grads, *logits) {
                    for ((d, &p), &t) in dl.iter_mut().zip(probs).zip(targets) {
                        *d += g[0] * (p - t) / batch;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(outer, len, inner)` extents around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swaps axes 1 and 2 of a rank-4 buffer with the given shape.
fn swap12(shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (b, p, q, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..p {
            for j in 0..q {
                let src = ((bi * p + i) * q + j) * d;
                let dst = ((bi * q + j) * p + i) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl Ops for Tape {
    type Var = Var;

    fn shape<'a>(&'a self, v: &'a Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (*a, *b);
        let (shape, macs) = ops::matmul_shape(self.shape(&a), self.shape(&b))?;
        let sa = self.shape(&a);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = shape[shape.len() - 1];
        let batch = batch_count(sa);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        if self.shape(&b).len() == 2 {
            gemm_nn(batch * m, k, n, ad, bd, &mut out);
        } else {
            for i in 0..batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        meter::record(macs);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, &[a, b]))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let a = *a;
        let shape = ops::transpose_shape(self.shape(&a))?;
        let (r, c) = (shape[shape.len() - 1], shape[shape.len() - 2]);
        let data: Vec<f64> = self
            .data(a)
            .chunks(r * c)
            .flat_map(|m| transpose(r, c, m))
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Transpose { a }, &[a]))
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let a = *a;
        let shape = ops::reshape_shape(self.shape(&a), shape)?;
        let data = self.data(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { a }, &[a]))
    }

    fn swap_axes12(&mut self, a: &Var) -> Result<Var> {
        let a = *a;
        let shape = ops::swap12_shape(self.shape(&a))?;
        let data = swap12(self.shape(&a), self.data(a));
        Ok(self.push(Tensor::new(shape, data)?, Op::SwapAxes12 { a }, &[a]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (*a, *b);
        let shape = ops::broadcast_shape("add", self.shape(&a), self.shape(&b))?;
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(bd.len()) {
            add_into(chunk, bd);
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, &[a, b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (*a, *b);
        let shape = ops::broadcast_shape("mul", self.shape(&a), self.shape(&b))?;
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(bd.len()) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x *= y;
            }
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, &[a, b]))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let a = *a;
        let value = self.value(a);
        let data = value.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(value.shape(), data).expect("same shape");
        self.push(value, Op::Scale { a, s }, &[a])
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let a = *a;
        let value = self.value(a);
        let tanh: Vec<f64> = value.data().iter().map(|&x| ops::gelu_tanh(x)).collect();
        let data = value
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| ops::gelu_from_tanh(x, t))
            .collect();
        let value = Tensor::new(value.shape(), data).expect("same shape");
        self.push(value, Op::Gelu { a, tanh }, &[a])
    }

    fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let a = *a;
        let shape = ops::softmax_shape(self.shape(&a), axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut y = vec![0.0; x.len()];
        if inner == 1 {
            for (xr, yr) in x.chunks(len).zip(y.chunks_mut(len)) {
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (yj, &xj) in yr.iter_mut().zip(xr) {
                    *yj = (xj - max).exp();
                    sum += *yj;
                }
                yr.iter_mut().for_each(|v| *v /= sum);
            }
            return Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { a, axis }, &[a]));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { a, axis }, &[a]))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (x, gain, bias) = (*x, *gain, *bias);
        if eps <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "layer norm eps {eps} must be positive"
            )));
        }
        let shape = ops::layer_norm_shape(self.shape(&x), self.shape(&gain), self.shape(&bias))?;
        let d = shape[shape.len() - 1];
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x, gain, bias]))
    }

    fn gather_rows(&mut self, x: &Var, indices: &[Vec<usize>]) -> Result<Var> {
        let x = *x;
        let shape = ops::gather_shape(self.shape(&x), indices)?;
        let s = self.shape(&x);
        let (n, d) = (s[1], s[2]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(shape.iter().product());
        for bi in 0..shape[0] {
            let list = if indices.len() == 1 {
                &indices[0]
            } else {
                &indices[bi]
            };
            for &src in list {
                out.extend_from_slice(&xd[(bi * n + src) * d..(bi * n + src + 1) * d]);
            }
        }
        let op = Op::Gather {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x]))
    }

    fn prepend_row(&mut self, x: &Var, row: &Var) -> Result<Var> {
        let (x, row) = (*x, *row);
        let shape = ops::prepend_shape(self.shape(&x), self.shape(&row))?;
        let (n, d) = (shape[1] - 1, shape[2]);
        let (xd, rd) = (self.data(x), self.data(row));
        let mut out = Vec::with_capacity(shape.iter().product());
        for bi in 0..shape[0] {
            out.extend_from_slice(rd);
            out.extend_from_slice(&xd[bi * n * d..(bi + 1) * n * d]);
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::PrependRow { x, row },
            &[x, row],
        ))
    }

    fn mean_all(&mut self, a: &Var) -> Var {
        let a = *a;
        let d = self.data(a);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(mean), Op::MeanAll { a }, &[a])
    }

    fn sum_all(&mut self, a: &Var) -> Var {
        let a = *a;
        let sum = self.data(a).iter().sum::<f64>();
        self.push(Tensor::scalar(sum), Op::SumAll { a }, &[a])
    }

    fn smoothed_cross_entropy(
        &mut self,
        logits: &Var,
        labels: &[usize],
        alpha: f64,
    ) -> Result<Var> {
        let logits = *logits;
        ops::cross_entropy_check(self.shape(&logits), labels, alpha)?;
        let k = self.shape(&logits)[1];
        let mut targets = vec![alpha / k as f64; labels.len() * k];
        let mut probs = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for (b, (row, &label)) in self.data(logits).chunks(k).zip(labels).enumerate() {
            targets[b * k + label] += 1.0 - alpha;
            let logp = log_softmax_row(row);
            total -= logp
                .iter()
                .zip(&targets[b * k..(b + 1) * k])
                .map(|(lp, t)| t * lp)
                .sum::<f64>();
            probs.extend(logp.iter().map(|lp| lp.exp()));
        }
        let loss = total / labels.len() as f64;
        let op = Op::SmoothedCe {
            logits,
            targets,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }
}
