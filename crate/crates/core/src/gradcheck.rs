//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on an inference tape, so
//! it shares no code with the backward rules it checks.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is near zero are judged on absolute error instead.
    pub denom_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            denom_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.denom_floor)
    }

    /// Compares tape gradients of the scalar `f(inputs)` against central
    /// differences for every element of every input.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
            let loss = f(&tape, &vars)?;
            tape.backward(loss)?;
            vars.iter()
                .map(|v| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(v.shape())))
                .collect()
        };

        let eval = |values: &[Tensor]| -> Result<f64> {
            let tape = Tape::inference();
            let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&tape, &vars)?;
            let v = out.value().item()?;
            Ok(v)
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for i in 0..inputs.len() {
            for e in 0..inputs[i].numel() {
                let orig = inputs[i].data()[e];
                work[i].data_mut()[e] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[e] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i].data()[e];
                if !numeric.is_finite() {
                    return Err(Error::NonFinite { op: "gradcheck" });
                }
                let err = self.rel_err(a, numeric);
                if err > report.max_rel_err || report.checked == 0 {
                    report.max_rel_err = err;
                    report.worst = (i, e);
                    report.analytic = a;
                    report.numeric = numeric;
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}
