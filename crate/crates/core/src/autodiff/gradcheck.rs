use super::tape::{Fault, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst disagreement found for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            fault: None,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let tape = Tape::with_fault(self.fault);
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::usage(format!(
                "grad_check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        drop(grads);
        drop(vars);

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = perturbed.iter().map(|x| tape.constant(x.clone())).collect();
            Ok(f(&tape, &vars)?.item())
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut reports = Vec::with_capacity(inputs.len());
        for (which, grad) in analytic.iter().enumerate() {
            let mut report = InputReport {
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for i in 0..grad.numel() {
                let orig = work[which].data()[i];
                work[which].data_mut()[i] = orig + self.step;
                let plus = eval(&work)?;
                work[which].data_mut()[i] = orig - self.step;
                let minus = eval(&work)?;
                work[which].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[i];
                let err = relative_error(a, numeric);
                if err > report.max_rel_error || i == 0 {
                    report = InputReport {
                        max_rel_error: err,
                        worst_index: i,
                        analytic: a,
                        numeric,
                    };
                }
            }
            reports.push(report);
        }
        Ok(GradCheckReport { inputs: reports })
    }
}

/// Single-input gradient check at step `h`; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let check = GradCheck { step: h, fault: None };
    let report = check.run(std::slice::from_ref(x), |tape, vars| f(tape, vars[0]))?;
    Ok(report.max_rel_error())
}
