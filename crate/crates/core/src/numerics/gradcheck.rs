//! Central finite-difference verification of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::TensorError;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_relative_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `eps`, over every coordinate of every parameter.
///
/// `params` is perturbed in place and restored before returning.
pub fn grad_check<F>(
    params: &mut ParamStore,
    eps: f64,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(TensorError::InvalidEpsilon(eps));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?.into_vec()
    };
    let eval = |params: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(params);
            params.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(params);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite("finite difference"));
            }
            let a = analytic[id.index()].data()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(params.name(id).to_owned());
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}
