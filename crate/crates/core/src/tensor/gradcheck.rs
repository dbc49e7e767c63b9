//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Base step, scaled by `max(1, |x_i|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many elements per input (evenly spaced); `None`
    /// checks every element.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error over checked, non-kink elements.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements skipped because one-sided differences disagree more than the
    /// central difference disagrees with the tape (a breakpoint lies inside
    /// the stencil).
    pub kinks: usize,
    pub failures: Vec<ElementMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.failures.extend(other.failures);
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Tape("gradient_check needs a scalar function".into()));
    }
    Ok(tape.value(y).item())
}

fn sample_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m + (n / m) / 2).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks the tape gradient of the scalar `f` with respect to every tensor
/// in `inputs`.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], opts: GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward(y)?;
    let f0 = tape.value(y).item();

    let mut report = GradCheckReport::default();
    for (k, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt_or_zeros(&tape, var);
        let mut part = GradCheckReport::default();
        for idx in sample_indices(input.numel(), opts.max_elements) {
            let x = input.data()[idx];
            let h = opts.step * x.abs().max(1.0);
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[idx] = x + delta;
                let mut perturbed = inputs.to_vec();
                perturbed[k] = Tensor::new(input.shape(), data)?;
                evaluate(&f, &perturbed)
            };
            let fp = shifted(h)?;
            let fm = shifted(-h)?;
            let central = (fp - fm) / (2.0 * h);
            let asym = ((fp - f0) / h - (f0 - fm) / h).abs();
            let a = analytic[idx];
            let err = relative_error(a, central);
            if err >= opts.tolerance && asym >= (a - central).abs() {
                part.kinks += 1;
                continue;
            }
            part.checked += 1;
            part.max_rel_error = part.max_rel_error.max(err);
            if err >= opts.tolerance {
                part.failures.push(ElementMismatch {
                    input: k,
                    index: idx,
                    analytic: a,
                    numeric: central,
                });
            }
        }
        report.merge(part);
    }
    Ok(report)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &Tensor, opts: GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), opts)
}
