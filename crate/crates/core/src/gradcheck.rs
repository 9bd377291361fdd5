//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh graph from the given parameter leaves
/// and returns the scalar root. Returns the max over all coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            let orig = params[pi].data()[k];
            probe[pi].data_mut()[k] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[k] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (grads[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Gradients of `f` with respect to every parameter tensor.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let value = g.scalar_value(root)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("oracle: f evaluated to {value}")));
    }
    g.backward(root)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.scalar_value(root)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("oracle: f evaluated to {v}")));
    }
    Ok(v)
}
