use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    /// Infinite when a NaN or infinity was encountered.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries: usize,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_error < tolerance
    }
}

/// Compares reverse-mode gradients of `f` against central differences,
/// everything evaluated in `f64`.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and returns
/// the scalar it wants checked.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Param(format!("finite-difference eps {eps} outside [1e-6, 1e-2]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| tape.grad(v).expect("leaf gradient").clone()).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries: 0, non_finite: false };
    let mut work = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            report.entries += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = true;
                report.max_rel_error = f64::INFINITY;
                report.worst = Some((pi, idx));
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}
