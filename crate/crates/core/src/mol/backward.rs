//! Implicit differentiation through the MOL fixed point.
//!
//! With `T(x) = R((1−α)x + αH(x))` and `R = (I + αλAᴴA)⁻¹`, the adjoint
//! `u = (I − J_Tᵀ)⁻¹ g` is found by iterating `u ← J_Tᵀu + g`, where
//! `J_Tᵀv = ((1−α)I + αJ_Hᵀ)Rv`. Parameter and measurement gradients
//! follow as `α·∂_θHᵀ(Ru)` and `αλ·A(Ru)`.

use super::{resolvent, BackwardMode, MolConfig};
use crate::denoiser::{DenoiserNet, NetGradient};
use crate::imaging::{ComplexImage, KSpaceData};
use crate::linops::SenseModel;
use crate::solvers::fixed_point_iterate;
use crate::{MolError, Real, Result};

#[derive(Debug, Clone)]
pub struct DeqGradient<T> {
    /// Gradient with respect to the network parameters.
    pub theta: NetGradient<T>,
    /// Gradient with respect to the measurements `b`.
    pub measurement: KSpaceData<T>,
    /// The adjoint state `u` (equal to the loss gradient in jacobian-free mode).
    pub adjoint: ComplexImage<T>,
    pub adjoint_residuals: Vec<f64>,
}

/// Gradients of a loss `ℓ(x*)` given `loss_grad = ∂ℓ/∂x*`.
///
/// `x_star` must be a converged fixed point for the same `b`, `net`,
/// `model` and `config`.
pub fn deq_backward<T: Real>(
    b: &KSpaceData<T>,
    x_star: &ComplexImage<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &MolConfig<T>,
    loss_grad: &ComplexImage<T>,
) -> Result<DeqGradient<T>> {
    deq_backward_from(b, x_star, net, model, config, loss_grad, None)
}

/// As [`deq_backward`], warm-starting the adjoint iteration at `u0`.
pub fn deq_backward_from<T: Real>(
    b: &KSpaceData<T>,
    x_star: &ComplexImage<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &MolConfig<T>,
    loss_grad: &ComplexImage<T>,
    u0: Option<&ComplexImage<T>>,
) -> Result<DeqGradient<T>> {
    let shape = model.image_shape().to_vec();
    x_star.expect_shape(&shape)?;
    loss_grad.expect_shape(&shape)?;
    if b.shape() != model.kspace_shape().as_slice() {
        return Err(MolError::ShapeMismatch {
            expected: model.kspace_shape(),
            actual: b.shape().to_vec(),
        });
    }
    let (alpha, lambda) = (config.alpha(), config.lambda());
    let c = alpha * lambda;
    let solver = &config.solver;
    if loss_grad.norm() == T::zero() {
        return Ok(DeqGradient {
            theta: NetGradient::zeros(net.param_count()),
            measurement: KSpaceData::zeros(model.ncoils(), &shape),
            adjoint: loss_grad.clone(),
            adjoint_residuals: Vec::new(),
        });
    }
    let (_, cache) = net.forward_cached(x_star)?;

    let (u, residuals) = match config.backward_mode {
        BackwardMode::JacobianFree => (loss_grad.clone(), Vec::new()),
        BackwardMode::ImplicitAdjoint => {
            let start = match u0 {
                Some(u) => {
                    u.expect_shape(&shape)?;
                    u.clone()
                }
                None => loss_grad.clone(),
            };
            let res = fixed_point_iterate(
                |u| {
                    let w = resolvent(model, c, u, solver)?;
                    let (mut next, _) = net.backward(&cache, &w, false)?;
                    next.scale(alpha);
                    next.axpy(T::one() - alpha, &w);
                    next.axpy(T::one(), loss_grad);
                    Ok(next)
                },
                start,
                solver,
            )?;
            if !res.converged {
                return Err(MolError::AdjointNotConverged {
                    iterations: res.iterations,
                    residual: res.residuals.last().copied().unwrap_or(f64::NAN),
                });
            }
            (res.x_star, res.residuals)
        }
    };

    let w = resolvent(model, c, &u, solver)?;
    let (_, theta) = net.backward(&cache, &w, true)?;
    let mut theta = theta.expect("parameter gradient requested");
    theta.scale(alpha);
    let mut measurement = model.apply(&w)?;
    measurement.scale(c);
    Ok(DeqGradient {
        theta,
        measurement,
        adjoint: u,
        adjoint_residuals: residuals,
    })
}
