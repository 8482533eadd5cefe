//! Central-difference gradient checks in `f64`.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error floor used in the denominator.
const FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::dim("gradient_check", "function must return a scalar"));
    }
    let s = t.item();
    if !s.is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    Ok(s)
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zero);
    if !analytic.is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    let mut point = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let plus = eval(&point)?;
        point.data_mut()[i] = orig - eps;
        let minus = eval(&point)?;
        point.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Gradient check over every trainable parameter coordinate (or every
/// `stride`-th coordinate of each parameter when `stride > 1`).
pub fn gradient_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    eps: f64,
    stride: usize,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?.into_param_grads(store.len())
    };
    let mut work = store.clone();
    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.param(id).trainable {
            continue;
        }
        let n = store.get(id).numel();
        for i in (0..n).step_by(stride.max(1)) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = {
                let mut tape = Tape::with_params(&work);
                let out = f(&mut tape)?;
                scalar_of(&tape, out)?
            };
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = {
                let mut tape = Tape::with_params(&work);
                let out = f(&mut tape)?;
                scalar_of(&tape, out)?
            };
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.param(id).name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
