//! Central finite differences as an independent check on the tape.

use crate::error::{contract, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::Tensor;

/// Max over coordinates of `|central difference - autodiff| / (|autodiff| + 1e-8)`.
///
/// `f` builds a scalar from the leaf it is handed; it is re-run at `x ± h·e_i`
/// on a grad-free tape for the numeric side.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt_or_zeros(&g, leaf)?;
    let coords: Vec<usize> = (0..x.len()).collect();
    max_relative_error(&f, x, &analytic, &coords, h)
}

/// Like [`finite_diff_check`] but only probes `coords`, comparing against a
/// caller-supplied analytic gradient.
pub fn max_relative_error<F>(
    f: &F,
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::no_grad();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(contract(format!("objective has shape {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((numeric - a).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
