//! Central finite-difference gradient checking in double precision.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Step used by the central difference `(f(x+h) - f(x-h)) / 2h`.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Smallest denominator of the relative error, so that elements whose true
/// gradient is zero are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a floored denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new().with_finite_check(true);
    let vars = inputs
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::Graph("missing gradient for input".into()))
        })
        .collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vs)?;
        g.value(out)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
