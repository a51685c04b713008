//! Dense 64-bit tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig};
pub use graph::{AttentionInputs, Gradients, Graph, Var, IGNORE_INDEX};
pub use kernels::LAYER_NORM_EPS;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::standalone();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.tensor(out))
}

/// Softmax over the last dimension. Fully masked (`-inf`) rows become zeros.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::standalone();
    let v = g.input(x.clone());
    let out = g.softmax(v)?;
    Ok(g.tensor(out))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::standalone();
    let (vx, vg, vb) = (g.input(x.clone()), g.input(gain.clone()), g.input(bias.clone()));
    let out = g.layer_norm(vx, vg, vb)?;
    Ok(g.tensor(out))
}

/// Mean cross-entropy of `logits[n, classes]` against `targets`
/// ([`IGNORE_INDEX`] entries skipped).
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::standalone();
    let v = g.input(logits.clone());
    let out = g.cross_entropy(v, targets)?;
    Ok(g.scalar(out))
}
