use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, one coordinate at a time.
///
/// `f` receives a fresh graph and the recorded input variable and must return
/// a `1 x 1` result.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::config(format!("finite-difference step must be positive, got {eps}")));
    }

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let y0 = g.value(y).item();
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("function value {y0} at the base point")));
    }
    g.backward(y)?;
    let (r, c) = point.shape();
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(r, c));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut numeric = Tensor::zeros(r, c);
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} perturbation: f(+)={fp}, f(-)={fm}"
            )));
        }
        let n = (fp - fm) / (2.0 * eps);
        numeric.data_mut()[i] = n;
        let err = (analytic.data()[i] - n).abs() / n.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(GradCheck { max_rel_error: worst, analytic, numeric })
}
