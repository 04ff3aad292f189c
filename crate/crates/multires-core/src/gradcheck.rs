//! Finite-difference verification of reverse-mode gradients.
//!
//! [`grad_check`] rebuilds the computation at perturbed parameter values and
//! compares central differences against the tape's gradients. Used by the
//! test suites; exposed publicly so downstream experiments can verify
//! hand-assembled objectives.

use crate::tape::{Tape, Tensor, TensorError, TensorId};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across every coordinate of every parameter:
    /// `|g_ad − g_fd| / max(1, |g_fd|)`.
    pub max_rel_error: f64,
    /// Tolerance the check was run against.
    pub tol: f64,
    /// Whether `max_rel_error < tol`.
    pub passed: bool,
    /// Coordinates checked, across all parameters.
    pub coords: usize,
    /// `(parameter index, coordinate, analytic, numeric)` for the worst pair.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compare tape gradients of `build` against central finite differences.
///
/// `build` must register each tensor in `params` on the tape (in order) and
/// return the scalar loss. It is invoked `1 + 2·Σ len(p)` times: once for the
/// analytic pass, twice per coordinate for the differences.
pub fn grad_check(
    build: impl Fn(&mut Tape, &[Tensor]) -> Result<TensorId, TensorError>,
    params: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError> {
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, values)?;
        Ok(tape.value(loss).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = tape
        .parameters()
        .iter()
        .map(|&id| tape.grad(id).expect("gradients exist after backward").to_vec())
        .collect();
    assert_eq!(
        analytic.len(),
        params.len(),
        "build() must register every parameter on the tape"
    );

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tol,
        passed: true,
        coords: 0,
        worst: None,
    };

    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            let mut vp = p.values().to_vec();
            let mut vm = p.values().to_vec();
            vp[ci] += step;
            vm[ci] -= step;
            plus[pi] = Tensor::new(p.shape().to_vec(), vp)?;
            minus[pi] = Tensor::new(p.shape().to_vec(), vm)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let ad = analytic[pi][ci];
            let rel = (ad - numeric).abs() / numeric.abs().max(1.0);
            report.coords += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci, ad, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
