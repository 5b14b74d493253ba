use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Outcome of one [`adam_step`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct StepReport {
    pub updated: usize,
    /// Parameters whose gradient contained NaN or infinity; left unchanged.
    pub rejected: Vec<String>,
}

impl<T: Real> OptimState<T> {
    pub fn new(learning_rate: f64) -> Self {
        OptimState {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry keep
/// their values and moments.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
) -> Result<StepReport> {
    if let Some(unknown) = grads.keys().find(|k| !params.contains(k)) {
        return Err(Error::invalid(format!("gradient for unknown parameter {unknown}")));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let mut report = StepReport::default();

    for (path, g) in grads {
        if !g.all_finite() {
            report.rejected.push(path.clone());
            continue;
        }
        let p = params.get_mut(path).expect("checked above");
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: format!("adam/{path}"),
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        let m = state
            .first
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi.as_f64();
            let mi = b1 * md[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].as_f64() + (1.0 - b2) * gi * gi;
            md[i] = T::of(mi);
            vd[i] = T::of(vi);
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let step = state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
            pd[i] = T::of(pd[i].as_f64() - step);
        }
        report.updated += 1;
    }
    Ok(report)
}
