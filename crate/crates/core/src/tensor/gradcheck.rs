//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Below this analytic magnitude a coordinate is compared absolutely.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckTolerance {
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate error (relative, or absolute below the floor).
    pub max_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tol
    }
}

/// Compare the tape gradient of the scalar `f(inputs)` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tolerance: GradCheckTolerance) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let GradCheckTolerance { eps, tol } = tolerance;
    assert!(eps > 0.0, "eps must be positive");

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_error = 0.0;
    let mut worst = None;
    for (i, input) in inputs.iter().enumerate() {
        let mut num = vec![0.0; input.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            *slot = (plus - minus) / (2.0 * eps);

            let a = analytic[i].data()[j];
            let err = coordinate_error(a, *slot);
            if err > max_error || err.is_nan() {
                max_error = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some((i, j));
            }
        }
        numeric.push(Tensor::new(input.shape().to_vec(), num)?);
    }
    Ok(GradCheckReport {
        max_error,
        worst,
        analytic,
        numeric,
        tol,
    })
}

fn coordinate_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}
