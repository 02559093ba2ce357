//! Finite-difference gradient verification.

use super::{Result, Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_GRAD_CHECK_H: f64 = 1e-5;

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences at `t`, coordinate by coordinate, and returns
/// the worst relative error. The relative error uses an absolute floor of
/// 1e-8 so near-zero gradients do not divide by near-zero magnitudes.
///
/// `f` may fail with any displayable error (loss-level checks included);
/// the failure is surfaced as a domain error of the check itself.
pub fn grad_check<F, E>(f: F, t: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> std::result::Result<Tensor, E>,
    E: std::fmt::Display,
{
    let f = |x: &Tensor| {
        f(x).map_err(|e| TensorError::Domain {
            op: "grad_check",
            detail: format!("function evaluation failed: {e}"),
        })
    };
    if !(h > 0.0) {
        return Err(TensorError::Domain {
            op: "grad_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let shape = t.shape();
    let base = t.values();

    // Analytic pass on a fresh differentiable leaf.
    let x = Tensor::from_vec(&shape, base.clone())?.with_grad();
    let loss = f(&x)?;
    if loss.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::from_vec(&shape, data)?;
        let out = f(&probe)?;
        if out.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(TensorError::Domain {
                op: "grad_check",
                detail: format!("non-finite difference quotient at coordinate {i}"),
            });
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
