//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over every coordinate of every leaf.
    pub max_rel_error: f64,
    /// Worst relative error per leaf, in input order.
    pub per_leaf: Vec<f64>,
    pub coordinates: usize,
}

/// `|a − n| / max(1e−8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, coordinate by coordinate.
///
/// `f` receives a fresh tape and the leaves bound as parameters, and must
/// return a scalar. It has to be deterministic.
pub fn finite_difference_check<F>(leaves: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(leaves, eps, f, |_| {})
}

/// As [`finite_difference_check`], but `tamper` may rewrite the analytic
/// gradients before comparison. Used to confirm that a check catches a
/// deliberately broken gradient.
pub fn finite_difference_check_with<F, T>(leaves: &[Tensor], eps: f64, mut f: F, tamper: T) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    T: FnOnce(&mut [Tensor]),
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("parameter leaves carry gradients"))
        .collect();
    tamper(&mut analytic);

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut per_leaf = vec![0.0f64; leaves.len()];
    let mut coordinates = 0;
    for li in 0..leaves.len() {
        for ci in 0..leaves[li].len() {
            let orig = leaves[li].data()[ci];
            work[li].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[li].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[li].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[li].data()[ci], numeric);
            per_leaf[li] = per_leaf[li].max(err);
            coordinates += 1;
        }
    }
    let max_rel_error = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_leaf,
        coordinates,
    })
}
