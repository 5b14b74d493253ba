//! Training objectives. The `*_var` functions record onto a [`Graph`] and are
//! what training differentiates; the plain functions evaluate the same
//! expressions on `f64` slices.

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Real, Tensor, Var};

/// Per-step loss values written to the training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_t: f64,
    pub l_g: f64,
    pub l_pre: f64,
    pub l_mse: f64,
    pub l_pearson: f64,
    pub l_fine: f64,
    pub masked_count: usize,
    pub supervised_edge_count: usize,
}

/// Mean squared reconstruction error over masked (node, step) positions, all
/// channels. `x` and `x_r` are `[.., N, T, F]`; `mask` is `[.., N, T]` with
/// true where masked.
pub fn loss_temporal_var<T: Real>(g: &mut Graph<T>, x: &Tensor<T>, x_r: Var, mask: &[bool]) -> Result<Var> {
    let f = *x.shape().last().expect("non-empty shape");
    if g.shape(x_r) != x.shape() || mask.len() * f != x.numel() {
        return Err(Error::Shape {
            op: "loss_temporal".into(),
            detail: format!("x {:?}, x_r {:?}, mask of {}", x.shape(), g.shape(x_r), mask.len()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("temporal loss needs at least one masked position"));
    }
    let full: Vec<bool> = mask.iter().flat_map(|&m| std::iter::repeat_n(m, f)).collect();
    let target = g.constant(x.clone());
    g.scoped("loss_temporal", |g| {
        let pred = g.masked_select(x_r, &full)?;
        let truth = g.masked_select(target, &full)?;
        let diff = g.sub(pred, truth)?;
        let sq = g.square(diff)?;
        Ok(g.mean(sq))
    })
}

/// Mean squared adjacency error over `kept` entries (the unmasked ones).
pub fn loss_graph_var<T: Real>(g: &mut Graph<T>, a: &Tensor<T>, a_hat: Var, kept: &[bool]) -> Result<Var> {
    if g.shape(a_hat) != a.shape() || kept.len() != a.numel() {
        return Err(Error::Shape {
            op: "loss_graph".into(),
            detail: format!("a {:?}, â {:?}, kept of {}", a.shape(), g.shape(a_hat), kept.len()),
        });
    }
    let supervised_nonzero = a.data().iter().zip(kept).any(|(&w, &k)| k && w != T::zero());
    if !supervised_nonzero {
        return Err(Error::invalid("graph loss has no supervised nonzero entry"));
    }
    let target = g.constant(a.clone());
    g.scoped("loss_graph", |g| {
        let pred = g.masked_select(a_hat, kept)?;
        let truth = g.masked_select(target, kept)?;
        let diff = g.sub(pred, truth)?;
        let sq = g.square(diff)?;
        Ok(g.mean(sq))
    })
}

/// Mean of squared differences between a prediction `[N]`-shaped variable
/// and a constant target of the same shape.
pub fn loss_mse_var<T: Real>(g: &mut Graph<T>, y_hat: Var, y: &Tensor<T>) -> Result<Var> {
    let target = g.constant(y.clone());
    g.scoped("loss_mse", |g| {
        let diff = g.sub(y_hat, target)?;
        let sq = g.square(diff)?;
        Ok(g.mean(sq))
    })
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - m).collect();
    let ss = c.iter().map(|x| x * x).sum();
    (c, ss)
}

/// Relative variance floor below which a vector counts as constant.
const ZERO_VARIANCE: f64 = 1e-24;

fn has_variance(v: &[f64]) -> bool {
    let (_, ss) = centered(v);
    let scale = v.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    ss > ZERO_VARIANCE * scale && ss > 0.0
}

/// Negative Pearson correlation of a 1-d prediction against a constant
/// target. Zero variance in either argument gives [`Error::ZeroVariance`].
pub fn loss_pearson_var<T: Real>(g: &mut Graph<T>, y_hat: Var, y: &[f64]) -> Result<Var> {
    let n = y.len();
    if g.shape(y_hat) != [n] || n < 2 {
        return Err(Error::Shape {
            op: "loss_pearson".into(),
            detail: format!("prediction {:?} vs target of {n}", g.shape(y_hat)),
        });
    }
    if !has_variance(y) {
        return Err(Error::ZeroVariance("pearson target"));
    }
    if !has_variance(&g.value(y_hat).to_f64_vec()) {
        return Err(Error::ZeroVariance("pearson prediction"));
    }
    let (yc, syy) = centered(y);
    let yc = g.constant(Tensor::from_f64(&[n], &yc)?);
    g.scoped("loss_pearson", |g| {
        let mu = g.mean_axis(y_hat, 0)?;
        let pc = g.sub(y_hat, mu)?;
        let prod = g.mul(pc, yc)?;
        let cov = g.sum(prod);
        let sq = g.square(pc)?;
        let spp = g.sum(sq);
        let spp = g.scale(spp, syy);
        let denom = g.sqrt(spp);
        let corr = g.div(cov, denom)?;
        Ok(g.neg(corr))
    })
}

/// `λ_m · mse + pearson` for one cross-section.
pub fn loss_finetune_var<T: Real>(g: &mut Graph<T>, y_hat: Var, y: &[f64], lambda_m: f64) -> Result<Var> {
    if lambda_m < 0.0 {
        return Err(Error::invalid("λ_m must be non-negative"));
    }
    let yt = Tensor::from_f64(&[y.len()], y)?;
    let mse = loss_mse_var(g, y_hat, &yt)?;
    let p = loss_pearson_var(g, y_hat, y)?;
    let w = g.scale(mse, lambda_m);
    g.add(w, p)
}

/// `l_t + β·l_g`, or `β·l_g` alone when the temporal term is excluded.
pub fn loss_pretrain(l_t: f64, l_g: f64, beta: f64, include_temporal: bool) -> f64 {
    if include_temporal {
        l_t + beta * l_g
    } else {
        beta * l_g
    }
}

pub fn loss_pretrain_var<T: Real>(g: &mut Graph<T>, l_t: Var, l_g: Var, beta: f64, include_temporal: bool) -> Result<Var> {
    let w = g.scale(l_g, beta);
    if include_temporal {
        g.add(l_t, w)
    } else {
        Ok(w)
    }
}

fn eval<F>(build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).item())
}

/// [`loss_temporal_var`] on plain slices; shapes are `[N, T, F]` and `[N, T]`.
pub fn loss_temporal(x: &[f64], x_r: &[f64], mask: &[bool]) -> Result<f64> {
    if x.len() != x_r.len() || mask.is_empty() || !x.len().is_multiple_of(mask.len()) {
        return Err(Error::invalid("loss_temporal: inconsistent lengths"));
    }
    let f = x.len() / mask.len();
    eval(|g| {
        let xr = g.constant(Tensor::from_f64(&[mask.len(), f], x_r)?);
        loss_temporal_var(g, &Tensor::from_f64(&[mask.len(), f], x)?, xr, mask)
    })
}

pub fn loss_graph(a: &[f64], a_hat: &[f64], kept: &[bool]) -> Result<f64> {
    if a.len() != a_hat.len() || a.is_empty() {
        return Err(Error::invalid("loss_graph: inconsistent lengths"));
    }
    eval(|g| {
        let ah = g.constant(Tensor::from_f64(&[a.len()], a_hat)?);
        loss_graph_var(g, &Tensor::from_f64(&[a.len()], a)?, ah, kept)
    })
}

pub fn loss_mse(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::invalid("loss_mse: lengths differ"));
    }
    eval(|g| {
        let p = g.constant(Tensor::from_f64(&[y.len()], y_hat)?);
        loss_mse_var(g, p, &Tensor::from_f64(&[y.len()], y)?)
    })
}

pub fn loss_pearson(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::invalid("loss_pearson: lengths differ"));
    }
    eval(|g| {
        let p = g.constant(Tensor::from_f64(&[y.len()], y_hat)?);
        loss_pearson_var(g, p, y)
    })
}

pub fn loss_finetune(y_hat: &[f64], y: &[f64], lambda_m: f64) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::invalid("loss_finetune: lengths differ"));
    }
    eval(|g| {
        let p = g.constant(Tensor::from_f64(&[y.len()], y_hat)?);
        loss_finetune_var(g, p, y, lambda_m)
    })
}
