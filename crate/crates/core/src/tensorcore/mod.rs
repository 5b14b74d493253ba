//! Dense tensors with exact reverse-mode gradients, Adam, a finite-difference
//! gradient checker and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod memory;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{grad_check, grad_check_against, GradCheckReport, PathReport};
pub use graph::{Graph, LeafGrads, Var};
pub use optim::{adam_step, OptimState, StepReport};
pub use params::{Gradients, Initializer, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;

use crate::error::Result;

/// Records `loss_fn` on a fresh graph over `params`, then backpropagates.
/// Parameters under any `frozen` prefix are treated as constants.
pub fn forward_backward<T, F>(params: &ParamStore<T>, frozen: &[&str], loss_fn: F) -> Result<(f64, Gradients<T>)>
where
    T: Real,
    F: FnOnce(&mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    for f in frozen {
        g = g.freeze(*f);
    }
    let loss = loss_fn(&mut g)?;
    let leaf = g.backward(loss)?;
    let value = g.value(loss).item().as_f64();
    Ok((value, g.param_grads(&leaf)))
}
