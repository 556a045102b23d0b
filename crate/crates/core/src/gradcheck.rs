//! Central finite-difference checking of hand-written VJPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GdipError, Result};

/// A differentiable node over flat input and parameter buffers.
pub trait DiffOp {
    fn forward(&self, input: &[f64], params: &[f64]) -> Vec<f64>;

    /// Returns `(input gradient, parameter gradient)` for upstream `g_out`.
    fn vjp(&self, input: &[f64], params: &[f64], g_out: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// Gradients below this magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Input(usize),
    Param(usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub input_errors: Vec<f64>,
    pub param_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.input_errors.len() + self.param_errors.len()
    }
}

/// Compares `op.vjp` against central differences of `<g, op.forward>` for a
/// fixed pseudo-random upstream `g`.
pub fn grad_check(
    op: &dyn DiffOp,
    input: &[f64],
    params: &[f64],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(GdipError::invalid("finite-difference step must be positive"));
    }
    let base = op.forward(input, params);
    let again = op.forward(input, params);
    let max_diff = base
        .iter()
        .zip(&again)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if base.len() != again.len() || max_diff > 0.0 || base.iter().any(|v| v.is_nan()) {
        return Err(GdipError::NonDeterministic { max_diff });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x6d5a_11ce);
    let upstream: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (g_input, g_params) = op.vjp(input, params, &upstream);
    if g_input.len() != input.len() || g_params.len() != params.len() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![input.len(), params.len()],
            actual: vec![g_input.len(), g_params.len()],
        });
    }
    let objective = |x: &[f64], p: &[f64]| -> f64 {
        op.forward(x, p)
            .iter()
            .zip(&upstream)
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut probe = input.to_vec();
    let mut input_errors = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = objective(&probe, params);
        probe[i] = orig - step;
        let minus = objective(&probe, params);
        probe[i] = orig;
        input_errors.push(relative_error(g_input[i], (plus - minus) / (2.0 * step)));
    }

    let mut probe = params.to_vec();
    let mut param_errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = objective(input, &probe);
        probe[i] = orig - step;
        let minus = objective(input, &probe);
        probe[i] = orig;
        param_errors.push(relative_error(g_params[i], (plus - minus) / (2.0 * step)));
    }

    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (i, &e) in input_errors.iter().enumerate() {
        if e > max_rel_error || e.is_nan() {
            max_rel_error = e;
            worst = Some(Coordinate::Input(i));
        }
    }
    for (i, &e) in param_errors.iter().enumerate() {
        if e > max_rel_error || e.is_nan() {
            max_rel_error = e;
            worst = Some(Coordinate::Param(i));
        }
    }
    Ok(GradCheckReport {
        input_errors,
        param_errors,
        max_rel_error,
        worst,
        tol,
        passed: max_rel_error <= tol,
    })
}

/// Wraps a pair of closures as a [`DiffOp`].
pub struct FnOp<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<F, B> DiffOp for FnOp<F, B>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
{
    fn forward(&self, input: &[f64], params: &[f64]) -> Vec<f64> {
        (self.forward)(input, params)
    }

    fn vjp(&self, input: &[f64], params: &[f64], g_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.backward)(input, params, g_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn identity_matches() {
        let op = FnOp {
            forward: |x: &[f64], _: &[f64]| x.to_vec(),
            backward: |_: &[f64], _: &[f64], g: &[f64]| (g.to_vec(), vec![]),
        };
        let x: Vec<f64> = (0..12).map(|i| i as f64 / 16.0).collect();
        let report = grad_check(&op, &x, &[], 1e-5, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let op = FnOp {
            forward: |x: &[f64], p: &[f64]| x.iter().map(|v| v * v * p[0]).collect(),
            backward: |x: &[f64], p: &[f64], g: &[f64]| {
                // missing factor 2 on the input path
                let gi = x.iter().zip(g).map(|(v, g)| g * v * p[0]).collect();
                let gp = vec![x.iter().zip(g).map(|(v, g)| g * v * v).sum()];
                (gi, gp)
            },
        };
        let report = grad_check(&op, &[0.3, 0.7], &[1.5], 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
        assert!(matches!(report.worst, Some(Coordinate::Input(_))));
        assert!(report.param_errors[0] < 1e-8);
    }

    #[test]
    fn nondeterminism_rejected() {
        let counter = Cell::new(0.0);
        let op = FnOp {
            forward: |x: &[f64], _: &[f64]| {
                counter.set(counter.get() + 1.0);
                vec![x[0] + counter.get()]
            },
            backward: |_: &[f64], _: &[f64], g: &[f64]| (g.to_vec(), vec![]),
        };
        assert!(matches!(
            grad_check(&op, &[0.0], &[], 1e-5, 1e-4),
            Err(GdipError::NonDeterministic { .. })
        ));
    }

    #[test]
    fn bad_step_rejected() {
        let op = FnOp {
            forward: |x: &[f64], _: &[f64]| x.to_vec(),
            backward: |_: &[f64], _: &[f64], g: &[f64]| (g.to_vec(), vec![]),
        };
        assert!(grad_check(&op, &[0.0], &[], 0.0, 1e-4).is_err());
    }
}
