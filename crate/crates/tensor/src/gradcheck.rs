//! Central finite-difference gradient checking in 64-bit.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, for every element of every input.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check_gradients<G>(inputs: &[Tensor<f64>], h: f64, floor: f64, build: G) -> Result<GradReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradReport { max_rel_error: 0.0, checked: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf gradient").to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = probe[which].data()[e];
            probe[which].data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}
