//! Shape-only backend. Propagates extents through the same op set as the
//! tape and records identical MAC counts, without touching any data; this
//! is how the cost model reads the MAC count of a full-size ViT.

use crate::error::Result;
use crate::numerics::meter;
use crate::numerics::ops::{self, Ops};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Default)]
pub struct ShapeTracer;

impl ShapeTracer {
    pub fn new() -> Self {
        ShapeTracer
    }

    pub fn leaf_shape(&mut self, shape: &[usize]) -> Vec<usize> {
        shape.to_vec()
    }
}

impl Ops for ShapeTracer {
    type Var = Vec<usize>;

    fn shape<'a>(&'a self, v: &'a Vec<usize>) -> &'a [usize] {
        v
    }

    fn leaf(&mut self, value: Tensor, _requires_grad: bool) -> Vec<usize> {
        value.shape().to_vec()
    }

    fn matmul(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        let (shape, macs) = ops::matmul_shape(a, b)?;
        meter::record(macs);
        Ok(shape)
    }

    fn transpose(&mut self, a: &Vec<usize>) -> Result<Vec<usize>> {
        ops::transpose_shape(a)
    }

    fn reshape(&mut self, a: &Vec<usize>, shape: &[usize]) -> Result<Vec<usize>> {
        ops::reshape_shape(a, shape)
    }

    fn swap_axes12(&mut self, a: &Vec<usize>) -> Result<Vec<usize>> {
        ops::swap12_shape(a)
    }

    fn add(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        ops::broadcast_shape("add", a, b)
    }

    fn mul(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        ops::broadcast_shape("mul", a, b)
    }

    fn scale(&mut self, a: &Vec<usize>, _s: f64) -> Vec<usize> {
        a.clone()
    }

    fn gelu(&mut self, a: &Vec<usize>) -> Vec<usize> {
        a.clone()
    }

    fn softmax(&mut self, a: &Vec<usize>, axis: usize) -> Result<Vec<usize>> {
        ops::softmax_shape(a, axis)
    }

    fn layer_norm(
        &mut self,
        x: &Vec<usize>,
        gain: &Vec<usize>,
        bias: &Vec<usize>,
        _eps: f64,
    ) -> Result<Vec<usize>> {
        ops::layer_norm_shape(x, gain, bias)
    }

    fn gather_rows(&mut self, x: &Vec<usize>, indices: &[Vec<usize>]) -> Result<Vec<usize>> {
        ops::gather_shape(x, indices)
    }

    fn prepend_row(&mut self, x: &Vec<usize>, row: &Vec<usize>) -> Result<Vec<usize>> {
        ops::prepend_shape(x, row)
    }

    fn mean_all(&mut self, _a: &Vec<usize>) -> Vec<usize> {
        vec![1]
    }

    fn sum_all(&mut self, _a: &Vec<usize>) -> Vec<usize> {
        vec![1]
    }

    fn smoothed_cross_entropy(
        &mut self,
        logits: &Vec<usize>,
        labels: &[usize],
        alpha: f64,
    ) -> Result<Vec<usize>> {
        ops::cross_entropy_check(logits, labels, alpha)?;
        Ok(vec![1])
    }
}
