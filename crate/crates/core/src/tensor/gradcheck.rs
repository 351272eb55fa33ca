//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of every backward rule it checks.

use super::{no_grad, Tensor};
use crate::error::Result;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(param index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Checks every element of every tensor in `params`.
pub fn check_gradients<S, F>(params: &[Tensor<S>], h: f64, f: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
{
    check_gradients_sampled(params, h, usize::MAX, f)
}

/// Checks at most `max_per_param` evenly strided elements of each tensor.
///
/// The relative-error floor is 1% of the largest numeric gradient magnitude
/// seen, so entries whose true gradient is near zero are judged on absolute
/// error at the scale of the problem.
pub fn check_gradients_sampled<S, F>(
    params: &[Tensor<S>],
    h: f64,
    max_per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
{
    let leaves: Vec<Tensor<S>> = params.iter().map(Tensor::detach_param).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<S>> = leaves
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let probe: Vec<Tensor<S>> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == which {
                    let mut d = p.to_vec();
                    d[idx] = S::c(d[idx].f64() + delta);
                    Tensor::new(d, p.shape()).expect("same shape")
                } else {
                    p.detach()
                }
            })
            .collect();
        Ok(no_grad(|| f(&probe))?.item().f64())
    };

    let mut entries = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = n.div_ceil(max_per_param.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let numeric = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
            entries.push((i, j, analytic[i][j].f64(), numeric));
        }
    }

    let scale = entries.iter().map(|e| e.3.abs()).fold(0.0, f64::max);
    let floor = (0.01 * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: entries.len(),
    };
    for (i, j, a, n) in entries {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((i, j, a, n));
        }
    }
    Ok(report)
}
