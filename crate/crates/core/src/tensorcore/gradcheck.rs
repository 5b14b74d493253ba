//! Central-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::{Gradients, ParamStore};
use super::{forward_backward, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PathReport {
    pub path: String,
    pub numel: usize,
    /// Max over entries of |analytic − numeric| / max(1e-8, |analytic| + |numeric|);
    /// entries whose difference is within the central-difference round-off
    /// floor count as zero.
    pub max_rel_err: f64,
    pub flagged: bool,
    /// The loss was not finite at some probe point.
    pub unprobeable: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub eps: f64,
    pub tol: f64,
    pub paths: Vec<PathReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|p| !p.flagged && !p.unprobeable)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.paths.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Checks the tape gradients of `loss_fn` against central differences on
/// every trainable parameter it reaches.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let (loss, grads) = forward_backward(params, &[], &loss_fn)?;
    let mut report = grad_check_against(&grads, &loss_fn, params, eps, tol)?;
    report.loss = loss;
    Ok(report)
}

/// Like [`grad_check`] but compares against externally supplied analytic
/// gradients.
pub fn grad_check_against<F>(
    analytic: &Gradients<f64>,
    loss_fn: F,
    params: &ParamStore<f64>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let l = loss_fn(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut probe = params.clone();
    let mut paths = Vec::new();
    for (path, grad) in analytic {
        let n = grad.numel();
        let mut worst = 0.0f64;
        let mut unprobeable = false;
        for i in 0..n {
            let orig = probe.get(path).expect("gradient path exists").data()[i];
            set_entry(&mut probe, path, i, orig + eps);
            let up = eval(&probe)?;
            set_entry(&mut probe, path, i, orig - eps);
            let down = eval(&probe)?;
            set_entry(&mut probe, path, i, orig);
            if !up.is_finite() || !down.is_finite() {
                unprobeable = true;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            // Differences below the round-off floor of the central difference
            // are indistinguishable from zero and are not counted.
            let noise = 1e3 * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / eps;
            let diff = (a - numeric).abs();
            let rel = if diff <= noise { 0.0 } else { diff / (a.abs() + numeric.abs()).max(1e-8) };
            worst = worst.max(rel);
        }
        paths.push(PathReport {
            path: path.clone(),
            numel: n,
            max_rel_err: worst,
            flagged: worst > tol,
            unprobeable,
        });
    }
    Ok(GradCheckReport {
        loss: eval(params)?,
        eps,
        tol,
        paths,
    })
}

fn set_entry(store: &mut ParamStore<f64>, path: &str, i: usize, v: f64) {
    let t: &mut Tensor<f64> = store.get_mut(path).expect("path exists");
    t.data_mut()[i] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Initializer;

    fn store() -> ParamStore<f64> {
        let mut init = Initializer::new(9);
        let mut s = ParamStore::new(9);
        s.insert("q", init.uniform(&[3, 4], 3));
        s.insert("k", init.uniform(&[3, 4], 3));
        s.insert("v", init.uniform(&[3, 4], 3));
        s
    }

    #[test]
    fn linear_loss_is_exact() {
        let s = store();
        let r = grad_check(
            |g| {
                let q = g.param("q")?;
                let k = g.param("k")?;
                let a = g.add(q, k)?;
                let b = g.scale(a, 3.0);
                Ok(g.sum(b))
            },
            &s,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_err() < 1e-10);
    }

    fn attention_loss(g: &mut Graph<f64>) -> Result<Var> {
        let q = g.param("q")?;
        let k = g.param("k")?;
        let v = g.param("v")?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 0.5);
        let a = g.softmax(s, 1)?;
        let o = g.matmul(a, v)?;
        let sq = g.square(o)?;
        Ok(g.sum(sq))
    }

    #[test]
    fn softmax_attention_passes() {
        let r = grad_check(attention_loss, &store(), 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.paths.len(), 3);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let s = store();
        let (_, mut grads) = forward_backward(&s, &[], attention_loss).unwrap();
        let k = grads.get_mut("k").unwrap();
        k.data_mut().iter_mut().for_each(|x| *x *= 2.0);
        let r = grad_check_against(&grads, attention_loss, &s, 1e-5, 1e-4).unwrap();
        let flagged: Vec<_> = r.paths.iter().filter(|p| p.flagged).map(|p| p.path.as_str()).collect();
        assert_eq!(flagged, ["k"]);
    }

    #[test]
    fn non_finite_probe_marks_path_unprobeable() {
        let mut s = ParamStore::new(0);
        s.insert("x", Tensor::scalar(0.0));
        // sqrt(x) at 0: the lower probe is NaN.
        let r = grad_check(
            |g| {
                let x = g.param("x")?;
                let y = g.add_scalar(x, 1.0);
                let z = g.sqrt(x);
                let w = g.add(y, z)?;
                Ok(g.sum(w))
            },
            &s,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.paths[0].unprobeable);
        assert!(!r.passed());
    }
}
