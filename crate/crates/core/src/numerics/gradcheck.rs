//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, floor: 1e-6, max_coords: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, coordinate) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` receives a fresh tape and one leaf per input; every input
/// is marked `requires_grad`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!("repeated evaluation gave {base} then {again}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report =
        GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0, passed: true };
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        let n = inputs[which].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = inputs[which].data()[idx];
            probe[which].data_mut()[idx] = orig + opts.h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - opts.h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grads[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, idx);
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
