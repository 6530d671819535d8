use super::{precision_scope, Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, in 64-bit mode.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1e-8, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let _guard = precision_scope(Precision::F64);
    if !x.all_finite() {
        return Err(Error::NonFinite("grad_check input".into()));
    }

    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().with_grad())?;
    let loss = f(&mut g, xv)?;
    let analytic = g
        .backward(loss)?
        .get(xv)
        .ok_or(Error::Detached)?
        .into_data();

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(probe)?;
        let out = f(&mut g, v)?;
        let y = g.scalar(out)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(y)
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
