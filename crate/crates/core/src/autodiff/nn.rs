//! Small composite layers built from tape primitives.

use super::tape::{Tape, Var};
use crate::error::{Result, TkgError};

/// Weights of a gated recurrent unit acting on row-batched states.
///
/// Input-side matrices are `[d_in × d]`, recurrent ones `[d × d]`, biases `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// One GRU step on every row:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h̃  = tanh(x W_h + (r ⊗ h) U_h + b_h)
/// h' = (1 − z) ⊗ h + z ⊗ h̃
/// ```
pub fn gru_cell(tape: &mut Tape, h_prev: Var, x: Var, p: &GruVars) -> Result<Var> {
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
        let xi = tape.matmul(x, w)?;
        let hh = tape.matmul(h, u)?;
        let s = tape.add(xi, hh)?;
        tape.add_row(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = tape.tanh(cand_pre);
    let keep = tape.one_minus(z);
    let old = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

/// Entrywise arithmetic mean of same-shaped tensors.
pub fn mean_pool(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let (&first, rest) = rows
        .split_first()
        .ok_or_else(|| TkgError::contract("mean_pool over an empty set"))?;
    let mut acc = first;
    for &r in rest {
        acc = tape.add(acc, r)?;
    }
    Ok(tape.scale(acc, 1.0 / rows.len() as f64))
}

/// Elementwise convex mix `gate ⊗ a + (1 − gate) ⊗ b`.
pub fn gated_mix(tape: &mut Tape, gate: Var, a: Var, b: Var) -> Result<Var> {
    let left = tape.mul(gate, a)?;
    let keep = tape.one_minus(gate);
    let right = tape.mul(keep, b)?;
    tape.add(left, right)
}

/// `x W + b` for a row batch.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}
