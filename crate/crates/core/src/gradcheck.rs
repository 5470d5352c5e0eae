//! Central finite-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, `floor`).
    pub max_rel_err: f64,
    /// (leaf, element) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor, so entries whose true gradient is ~0 are judged on
/// absolute error instead of amplified round-off.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval(leaves: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar built by `build` with central
/// differences of step `h`, over every element of every leaf.
pub fn check(leaves: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, h: f64) -> Result<GradReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| tape.grad_data(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = leaves.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let x = leaf.data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work, build)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work, build)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference at leaf {i}, element {j}")));
            }
            let a = analytic[i][j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.checked == 1 {
                report = GradReport { max_rel_err: e, worst: (i, j), analytic: a, numeric, checked: report.checked };
            }
        }
    }
    Ok(report)
}
