//! Central finite-difference verification of tape gradients.

use super::params::{BoundParams, ParamSet};
use super::tape::{Result, Tape, Var};

/// Absolute gradient discrepancy treated as agreement regardless of scale.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|ad - fd|`, floor or not.
    pub max_abs_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Evaluates `f` once with backward and then twice per parameter coordinate
/// at `theta +- eps`, and reports the worst relative error between the tape
/// gradient and `(f(theta + eps) - f(theta - eps)) / 2 eps`.
///
/// The relative error of a coordinate is `|ad - fd| / max(|ad|, |fd|)`,
/// counted as zero when `|ad - fd| <= ABS_FLOOR`.
pub fn finite_diff_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let root = f(&mut tape, &bound)?;
    let grads = bound.grads(&tape.backward(root)?);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let root = f(&mut tape, &bound)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let ad = grads.get(name).expect("same layout");
        for i in 0..t.len() {
            let orig = t.values[i];
            probe.get_mut(name).unwrap().values[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(name).unwrap().values[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(name).unwrap().values[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = ad.values[i];
            let diff = (a - fd).abs();
            let rel = if diff <= ABS_FLOOR { 0.0 } else { diff / a.abs().max(fd.abs()) };
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
