//! Central finite differences for checking analytic gradients.
//!
//! Nothing here touches [`crate::graph`]'s backward pass: the loss closures
//! are evaluated as plain functions of their inputs, so agreement with
//! `backward()` is an independent check.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` gradients against central differences of `loss`
/// for every coordinate of every parameter named in `analytic`.
///
/// `floor` guards the relative error against coordinates whose true
/// gradient is (numerically) zero.
pub fn check_param_grads<F>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss: F,
    step: f64,
    floor: f64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::new();
    for (name, grad) in analytic {
        let base = store.get(name)?.clone();
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..base.numel() {
            let mut t = base.clone();
            t.data_mut()[i] = base.data()[i] + step;
            work.set(name, t.clone())?;
            let plus = loss(&work)?;
            t.data_mut()[i] = base.data()[i] - step;
            work.set(name, t)?;
            let minus = loss(&work)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, floor);
            if err > check.max_rel_error || check.checked == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            check.checked += 1;
        }
        work.set(name, base)?;
        out.push(check);
    }
    Ok(out)
}
