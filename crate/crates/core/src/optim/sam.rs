use crate::error::{Error, Result};
use crate::objective::Trainable;
use crate::params::{Gradient, ParameterVector};

use super::Optimizer;

/// What one SAM step computed.
#[derive(Debug, Clone)]
pub struct SamStepRecord {
    pub eps: ParameterVector,
    /// Norm of the gradient at the unperturbed point.
    pub grad_norm: f64,
    /// Gradient at the perturbed point, the one the base step used.
    pub perturbed_grad: Gradient,
}

/// `ρ·g/‖g‖`, or exactly zero when `ρ = 0` or `g = 0`.
pub fn sam_perturbation(grad: &Gradient, rho: f64) -> Result<ParameterVector> {
    if !(rho >= 0.0) {
        return Err(Error::Config(format!("rho must be non-negative, got {rho}")));
    }
    let norm = grad.norm();
    if rho == 0.0 || norm == 0.0 {
        return Ok(ParameterVector::zeros(grad.layout.clone()));
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let c = rho / norm;
    ParameterVector::new(grad.values.iter().map(|g| c * g).collect(), grad.layout.clone())
}

/// One SAM update on a single batch: gradient at `θ`, ascent to `θ + ε̂`,
/// gradient there, base step from `θ`. Always two gradient evaluations.
pub fn sam_step<T: Trainable>(
    objective: &T,
    optimizer: &mut Optimizer,
    params: &mut ParameterVector,
    batch: &T::Batch,
    rho: f64,
) -> Result<SamStepRecord> {
    let g1 = objective.gradient(params, batch)?;
    let eps = sam_perturbation(&g1, rho)?;
    let g2 = if eps.is_zero() {
        objective.gradient(params, batch)?
    } else {
        objective.gradient(&params.add(&eps)?, batch)?
    };
    optimizer.step(params, &g2)?;
    Ok(SamStepRecord { eps, grad_norm: g1.norm(), perturbed_grad: g2 })
}
