//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Finite-difference step used when callers have no reason to pick another.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares tape gradients of `f` at `point` with central differences.
///
/// `f` builds a scalar from one parameter node per tensor in `point`. It is
/// evaluated once on a recording tape and twice per coordinate on value-only
/// tapes.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::InvalidStep(step));
    }
    let names: Vec<String> = (0..point.len()).map(|i| format!("p{i}")).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .zip(&names)
        .map(|(t, n)| tape.param(n, t))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFiniteFunctionValue);
    }
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vars)?;
        let v = t.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteFunctionValue)
        }
    };

    let mut work = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        let analytic = grads.get(name).expect("registered parameter").data().to_vec();
        for (ci, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}
