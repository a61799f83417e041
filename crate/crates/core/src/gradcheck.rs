//! Central finite-difference verification of tape gradients.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Relative error used throughout: `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares the tape gradient of `f` against `(f(θ+eps) - f(θ-eps)) / 2eps`
/// for every coordinate of every trainable parameter in `store`.
///
/// `f` receives a fresh tape and the parameters bound on it (indexed by
/// `ParamId`) and must return a scalar node. It is called `1 + 2n` times.
pub fn finite_difference_check<S, F>(store: &ParamStore<S>, eps: f64, f: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let eval = |s: &ParamStore<S>| -> Result<f64> {
        let tape = Tape::new();
        let vars = s.bind(&tape);
        let v = f(&tape, &vars)?.item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let root = f(&tape, &vars)?;
        let v = root.item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        tape.backward(root)?.for_store(store)
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    for id in 0..store.len() {
        if !store.is_trainable(id) {
            continue;
        }
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + S::of(eps);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - S::of(eps);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id].data()[k].as_f64();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
