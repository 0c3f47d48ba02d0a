//! Central finite-difference gradient verification.
//!
//! Used by the test suite to pin every analytic gradient of the model
//! (DiffCorrNet, batch norm, transformer, CRF) against numeric estimates.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(x: &Matrix, eps: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + eps;
        let plus = f(&probe);
        probe.as_mut_slice()[k] = orig - eps;
        let minus = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`, maximized over entries.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Checks the analytic gradients of every trainable parameter in `store`.
///
/// `loss` evaluates the scalar loss at a given store; `analytic` is the
/// gradient list produced by the autodiff pass at the unperturbed store.
pub fn check_params(
    store: &ParamStore,
    analytic: &[(ParamId, Matrix)],
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<ParamCheck> {
    let mut work = store.clone();
    let mut report = Vec::new();
    for id in store.trainable_ids() {
        let zero = Matrix::zeros(store.get(id).rows(), store.get(id).cols());
        let a = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g)
            .unwrap_or(&zero);
        let base = store.get(id).clone();
        let numeric = numeric_gradient(&base, eps, |m| {
            *work.get_mut(id) = m.clone();
            loss(&work)
        });
        *work.get_mut(id) = base;
        report.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: max_relative_error(a, &numeric),
        });
    }
    report
}
