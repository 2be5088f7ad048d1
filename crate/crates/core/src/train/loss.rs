use nmt_tensor::{Float, Tape, Var};

use crate::error::{usage, Result};

/// Mean label-smoothed cross-entropy over positions where `pad` is false.
/// `logits` is `[positions, vocab]`.
pub fn label_smoothed_loss<F: Float>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
    pad: &[bool],
    eps: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return usage(format!("label smoothing must lie in [0, 1), got {eps}"));
    }
    if pad.len() != targets.len() {
        return usage(format!("{} pad flags for {} targets", pad.len(), targets.len()));
    }
    if pad.iter().all(|&p| p) {
        return usage("batch has no non-pad target positions");
    }
    let weights: Vec<F> = pad.iter().map(|&p| if p { F::zero() } else { F::one() }).collect();
    Ok(tape.cross_entropy(logits, targets, &weights, F::lit(eps))?)
}
