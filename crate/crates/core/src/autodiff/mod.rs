//! Dense `f64` tensors with reverse-mode gradients and forward-mode
//! Jacobian-vector products over a small op catalog.

mod backend;
pub mod check;
mod dual;
pub mod kernels;
mod tape;
mod tensor;
#[cfg(test)]
mod tests;

pub use backend::{Backend, Eval, Ops};
pub use dual::{DualEval, DualTensor};
pub use kernels::OpKind;
pub use tape::{ComputationRecord, Tape, Var};
pub use tensor::Tensor;

use crate::error::{shape_err, Result};

/// A computation written against the op catalog, evaluable on any backend.
pub trait Differentiable {
    fn apply<B: Backend>(&self, backend: &mut B, inputs: &[B::Value]) -> Result<B::Value>;
}

/// Evaluates `f(inputs)` and `J_f(inputs) · tangents` in one dual-number
/// forward pass.
pub fn jvp<F: Differentiable + ?Sized>(f: &F, inputs: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if inputs.len() != tangents.len() {
        return shape_err(
            "jvp",
            format!("{} inputs but {} tangents", inputs.len(), tangents.len()),
        );
    }
    let duals = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| DualTensor::new(x.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f.apply(&mut DualEval, &duals)?;
    Ok(out.into_parts())
}

/// Evaluates a scalar-valued `f(inputs)` on a fresh tape and returns it
/// with its gradient for every input.
pub fn value_and_grad<F: Differentiable + ?Sized>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.apply(&mut tape, &vars)?;
    let value = tape.value(out).clone();
    let grads = tape.grad(out, &vars)?;
    Ok((value.item()?, grads))
}
