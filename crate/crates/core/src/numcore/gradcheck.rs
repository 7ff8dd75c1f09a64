//! Central finite-difference verification of tape gradients.

use super::{Matrix, Tape, Var};
use crate::error::Result;

/// Outcome of [`grad_check`]: one entry per parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<f64>,
    pub analytic: Vec<Matrix>,
    pub numeric: Vec<Matrix>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error below this scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `loss_fn` at `params` with
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every entry of every parameter.
///
/// `loss_fn` receives a fresh tape plus one leaf per parameter, in order,
/// and must return a 1×1 loss.
pub fn grad_check<F>(params: &[Matrix], eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut num = Matrix::zeros(params[p].rows(), params[p].cols());
        let mut worst = 0.0f64;
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            probe[p].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[p].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[p].data_mut()[k] = orig;

            let d = (up - down) / (2.0 * eps);
            num.data_mut()[k] = d;
            worst = worst.max(relative_error(analytic[p].data()[k], d));
        }
        numeric.push(num);
        max_rel_error.push(worst);
    }

    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        numeric,
    })
}
