//! Dense tensors, the differentiation tape, and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, Var, LEAKY_SLOPE};
pub use tensor::Tensor;

use crate::error::Result;
use crate::Scalar;

/// Evaluates a one-input graph function on a constant and returns its value.
fn eval_unary<S: Scalar>(x: &Tensor<S>, f: impl FnOnce(&mut Graph<S>, Var) -> Result<Var>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.matmul(b)?.check_finite("matmul")
}

pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    eval_unary(x, |g, v| g.softmax(v, axis))
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    eval_unary(x, |g, v| g.sigmoid(v))
}

pub fn tanh<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    eval_unary(x, |g, v| g.tanh(v))
}

pub fn exp<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    eval_unary(x, |g, v| g.exp(v))
}

pub fn log<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    eval_unary(x, |g, v| g.log(v))
}

pub fn leaky_relu<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    eval_unary(x, |g, v| g.leaky_relu(v))
}

pub fn cross_entropy_with_logits<S: Scalar>(logits: &Tensor<S>, gold: usize) -> Result<S> {
    eval_unary(logits, |g, v| g.cross_entropy_with_logits(v, gold))?.item()
}
