//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the reverse-mode path it is checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error with a denominator floor, so gradients that are zero up to
/// round-off compare by absolute difference instead of blowing up.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    pub eps: f64,
    pub floor: f64,
    /// Added to every analytic gradient before comparison; a test hook.
    pub perturb: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
            perturb: 0.0,
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor], opts: GradCheckOpts, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = f(&tape, &vars)?;
        let v = tape.value(root).item();
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.values()[e];
            probe[ti].values_mut()[e] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe[ti].values_mut()[e] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe[ti].values_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].values()[e] + opts.perturb;
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, e, a, numeric));
            }
        }
    }
    Ok(report)
}
