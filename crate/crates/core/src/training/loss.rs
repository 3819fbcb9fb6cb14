//! Prediction and stability losses.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, TkgError};

/// Mean over queries of the full binary cross-entropy between `scores`
/// `[Q × |V|]` and multi-label `targets`.
pub fn prediction_loss(tape: &mut Tape, scores: Var, targets: &[f64]) -> Result<Var> {
    let q = tape.value(scores).rows();
    if q == 0 {
        return Err(TkgError::contract("prediction loss over zero queries"));
    }
    let total = tape.bce_sum(scores, targets)?;
    Ok(tape.scale(total, 1.0 / q as f64))
}

/// `Σ_pairs Σ_nodes (1 − cos(β_{t−1}, β_t))` over consecutive entries of
/// `betas`; zero for fewer than two entries.
pub fn disentangle_loss(tape: &mut Tape, betas: &[Var]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for pair in betas.windows(2) {
        let cos = tape.row_cosine(pair[0], pair[1])?;
        let gap = tape.one_minus(cos);
        let s = tape.sum(gap);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Unweighted sum; an absent stability term leaves the prediction loss.
pub fn total_loss(tape: &mut Tape, pred: Var, dis: Option<Var>) -> Result<Var> {
    match dis {
        Some(d) => tape.add(pred, d),
        None => Ok(pred),
    }
}
