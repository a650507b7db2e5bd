//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::Matrix;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    /// Converts a failing report into [`Error::GradCheck`].
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let worst = self
            .params
            .iter()
            .filter(|p| p.max_rel_error > self.tol)
            .map(|p| {
                format!(
                    "{}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.2e})",
                    p.name, p.worst_index, p.analytic, p.numeric, p.max_rel_error
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::GradCheck(format!("tol {:.1e}: {worst}", self.tol)))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn step_for(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Checks every coordinate of every named parameter.
///
/// `f` evaluates the scalar objective at the current parameter list; each
/// coordinate is perturbed in place and restored afterwards.
pub fn grad_check_params<F>(
    names: &[&str],
    params: &mut [Matrix],
    analytic: &[Matrix],
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if names.len() != params.len() || params.len() != analytic.len() {
        return Err(Error::Input("grad_check: names/params/grads length mismatch".into()));
    }
    let mut report = GradCheckReport {
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for p in 0..params.len() {
        if params[p].shape() != analytic[p].shape() {
            return Err(Error::shape("grad_check", params[p].shape(), analytic[p].shape()));
        }
        let mut check = ParamCheck {
            name: names[p].to_string(),
            coordinates: params[p].len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[p].len() {
            let theta = params[p].data()[i];
            let h = step_for(theta);
            params[p].data_mut()[i] = theta + h;
            let plus = f(params);
            params[p].data_mut()[i] = theta - h;
            let minus = f(params);
            params[p].data_mut()[i] = theta;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Divergence(format!(
                    "grad_check: objective not finite at {}[{i}] ({plus}, {minus})",
                    names[p]
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Single-matrix form: `f` maps the parameter matrix to a scalar.
pub fn grad_check<F>(mut f: F, params: &Matrix, analytic: &Matrix, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Matrix) -> f64,
{
    let mut ps = vec![params.clone()];
    grad_check_params(&["theta"], &mut ps, std::slice::from_ref(analytic), tol, |p| f(&p[0]))
}
