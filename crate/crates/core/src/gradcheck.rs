//! Finite-difference verification of tape gradients.
//!
//! Central differences with a fixed step compare against analytic
//! gradients; the reported figure is the worst relative error over all
//! coordinates, with the denominator floored at 1 so that near-zero
//! gradients are judged absolutely.

use crate::params::ParamSet;
use crate::tape::{Tape, Value};
use crate::tensor::NdArray;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst relative error between `analytic` and central differences of
/// `f` at `point`: max over coordinates of |a − fd| / max(1, |a|).
pub fn finite_diff_check(
    f: &mut dyn FnMut(&NdArray) -> f64,
    point: &NdArray,
    analytic: &NdArray,
    step: f64,
) -> f64 {
    assert_eq!(
        point.shape(),
        analytic.shape(),
        "gradient shape {:?} does not match point shape {:?}",
        analytic.shape(),
        point.shape()
    );
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut hi = point.clone();
        hi.data_mut()[i] += step;
        let mut lo = point.clone();
        lo.data_mut()[i] -= step;
        let fd = (f(&hi) - f(&lo)) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// Like [`finite_diff_check`] but only probes the given coordinates;
/// used for whole-model checks where the full sweep would be slow.
pub fn finite_diff_check_coords(
    f: &mut dyn FnMut(&NdArray) -> f64,
    point: &NdArray,
    analytic: &NdArray,
    step: f64,
    coords: &[usize],
) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let mut hi = point.clone();
        hi.data_mut()[i] += step;
        let mut lo = point.clone();
        lo.data_mut()[i] -= step;
        let fd = (f(&hi) - f(&lo)) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// Verifies analytic parameter gradients of `forward` (a scalar-valued
/// tape program over `set`) against central differences, parameter by
/// parameter. Returns the worst relative error; `coords_per_param`
/// limits probing to evenly spread coordinates (0 = all).
pub fn check_param_grads(
    set: &ParamSet,
    forward: &mut dyn FnMut(&mut Tape, &ParamSet) -> Value,
    step: f64,
    coords_per_param: usize,
) -> f64 {
    let mut tape = Tape::new();
    let out = forward(&mut tape, set);
    let grads = tape.backward(out);
    let mut probe = set.clone();
    probe.zero_grads();
    grads.accumulate_params(&tape, &mut probe);
    let mut worst = 0.0f64;
    for id in set.ids() {
        let point = set.get(id).value.clone();
        let analytic = probe.get(id).grad.clone();
        let n = point.len();
        let coords: Vec<usize> = if coords_per_param == 0 || coords_per_param >= n {
            (0..n).collect()
        } else {
            // deterministic spread over the parameter
            (0..coords_per_param)
                .map(|k| k * n / coords_per_param)
                .collect()
        };
        let mut f = |x: &NdArray| -> f64 {
            let mut moved = set.clone();
            moved.get_mut(id).value = x.clone();
            let mut t = Tape::new();
            let v = forward(&mut t, &moved);
            t.value(v).scalar_value()
        };
        let err = finite_diff_check_coords(&mut f, &point, &analytic, step, &coords);
        worst = worst.max(err);
    }
    worst
}
