//! Dense tensors, a recorded computation graph with reverse-mode
//! differentiation, and a central-difference gradient checker.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

use crate::error::Result;

/// Plain (unrecorded) matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.param(a, false), g.param(b, false));
    let c = g.matmul(va, vb)?;
    Ok(g.value(c).clone())
}

/// Plain causal attention over `[T, d]` inputs.
pub fn causal_softmax_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.param(q, false), g.param(k, false), g.param(v, false));
    let o = g.causal_attention(vq, vk, vv, n_heads)?;
    Ok(g.value(o).clone())
}

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (vx, vg) = (g.param(x, false), g.param(gain, false));
    let o = g.rmsnorm(vx, vg, eps)?;
    Ok(g.value(o).clone())
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    let mut g = Graph::new();
    let vl = g.param(logits, false);
    let o = g.cross_entropy(vl, targets, mask)?;
    Ok(g.value(o).item())
}
