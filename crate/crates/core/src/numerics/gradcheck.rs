use alloc::string::{String, ToString};
use core::marker::PhantomData;

use crate::error::Error;
use crate::numerics::tape::{ParamSet, Tape, Var};

/// Denominator floor of the relative error, so coordinates with
/// near-zero gradients are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error("loss is not finite when perturbing {param}[{index}]")]
    NonFinite { param: String, index: usize },
    #[error("loss evaluation failed: {0}")]
    Eval(#[from] Error),
}

/// Third argument of every grad-check loss closure. It carries the bound
/// `'s: 'a`, so a closure may put values borrowed for `'s` on a tape that
/// lives for `'a`.
#[derive(Debug, Clone, Copy)]
pub struct Scope<'a, 's: 'a>(PhantomData<&'a &'s ()>);

fn eval<'s, F>(params: &ParamSet, loss: &mut F) -> Result<f64, Error>
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ParamSet, Scope<'a, 's>) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, params, Scope(PhantomData))?;
    Ok(tape.scalar(l))
}

/// Compares tape gradients against central finite differences on every
/// coordinate of every parameter and returns the worst relative error
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<'s, F>(params: &mut ParamSet, eps: f64, loss: F) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ParamSet, Scope<'a, 's>) -> crate::Result<Var>,
{
    grad_check_strided(params, eps, usize::MAX, loss)
}

/// Like [`grad_check`] but visits at most `max_per_param` evenly spaced
/// coordinates of each parameter.
pub fn grad_check_strided<'s, F>(
    params: &mut ParamSet,
    eps: f64,
    max_per_param: usize,
    mut loss: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ParamSet, Scope<'a, 's>) -> crate::Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let grads = {
        let mut tape = Tape::new();
        let l = loss(&mut tape, params, Scope(PhantomData))?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(GradCheckError::NonFinite {
                param: "<unperturbed>".to_string(),
                index: 0,
            });
        }
        tape.backward(l, params)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
    };
    let ids: alloc::vec::Vec<_> = params.ids().collect();
    for id in ids {
        let len = params.value(id).len();
        let stride = if max_per_param == 0 { len.max(1) } else { len.div_ceil(max_per_param).max(1) };
        for k in (0..len).step_by(stride) {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + eps;
            let up = eval(params, &mut loss)?;
            params.value_mut(id).data_mut()[k] = orig - eps;
            let down = eval(params, &mut loss)?;
            params.value_mut(id).data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: params.name(id).to_string(),
                    index: k,
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
