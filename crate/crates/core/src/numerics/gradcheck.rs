use super::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the maximum relative error
/// `|autodiff − fd| / max(1, |fd|)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let fx = g.value(y).item()?;
    if !fx.is_finite() {
        return Err(Error::Numeric(format!("function value {fx} at the base point")));
    }
    let analytic = g.backward(y)?.tensor(xv);

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let y = f(&mut g, v)?;
        let val = g.value(y).item()?;
        if val.is_finite() {
            Ok(val)
        } else {
            Err(Error::Numeric(format!("function value {val} during finite differences")))
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for j in 0..x.numel() {
        let base = x.data()[j];
        probe.data_mut()[j] = base + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[j] = base - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[j] = base;
        let fd = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[j] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
