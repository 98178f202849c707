//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative error with a small absolute floor so that near-zero gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for input `which`, element `idx`.
pub fn central_difference(f: &dyn Fn(&[Tensor]) -> Result<f64>, inputs: &[Tensor], which: usize, idx: usize, h: f64) -> Result<f64> {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[idx] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[idx] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Probes dropped because the ±h stencil crossed a relu kink.
    pub kink_skips: usize,
}

/// Compares tape gradients of a scalar-valued `f` against central differences
/// over every element of every input.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut report = CheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        kink_skips: 0,
    };
    for (which, t) in inputs.iter().enumerate() {
        for idx in 0..t.numel() {
            let numeric = central_difference(&eval, inputs, which, idx, h)?;
            let a = analytic[which].data()[idx];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
