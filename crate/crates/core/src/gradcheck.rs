//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor};

pub const ABS_TOL: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

/// Step for coordinate `x`: `1e-5 * max(1, |x|)`.
pub fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS_TOL.max(REL_TOL * numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// (input, flat index, analytic, numeric) of the largest violation.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks every coordinate of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    gradcheck_at(inputs, &coords, f)
}

/// Checks only the listed `(input, flat index)` coordinates.
pub fn gradcheck_at<F>(inputs: &[Tensor], coords: &[(usize, usize)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.input(t, true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut worst_excess = f64::NEG_INFINITY;
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let x0 = inputs[i].data()[j];
        let h = step(x0);
        work[i].data_mut()[j] = x0 + h;
        let (tp, _, op) = eval(&work)?;
        let fp = tp.value(op).data()[0];
        work[i].data_mut()[j] = x0 - h;
        let (tm, _, om) = eval(&work)?;
        let fm = tm.value(om).data()[0];
        work[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g[j]);
        let err = (analytic - numeric).abs();
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(err);
        let excess = err - ABS_TOL.max(REL_TOL * numeric.abs());
        if excess > 0.0 {
            report.failures += 1;
        }
        if excess > worst_excess {
            worst_excess = excess;
            report.worst = Some((i, j, analytic, numeric));
        }
    }
    Ok(report)
}
