//! The damped MOL iteration
//! `x ← (I + αλAᴴA)⁻¹((1−α)x + αH_θ(x)) + z`, `z = (I + αλAᴴA)⁻¹(αλAᴴb)`,
//! its implicit backward pass, training, and the comparison baselines.

mod backward;
mod baselines;
mod memory;
mod train;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserNet;
use crate::imaging::{ComplexImage, KSpaceData};
use crate::linops::SenseModel;
use crate::solvers::{alpha_max, conjugate_gradient, fixed_point_iterate, FixedPointResult, SolverConfig};
use crate::{MolError, Real, Result};

pub use backward::{deq_backward, deq_backward_from, DeqGradient};
pub use baselines::{
    modl_backward, reconstruct_modl, reconstruct_sense, ModlConfig, ModlReconstruction, ModlReconstructor, MolReconstructor,
    Reconstructor, SenseReconstructor,
};
pub use memory::{memory_report, MemoryMode, MemoryReport};
pub use train::{
    train, train_modl, Adam, EpochLog, TrainConfig, TrainOutcome, TrainSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardMode {
    #[default]
    ImplicitAdjoint,
    JacobianFree,
}

/// Validated MOL hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MolConfig<T> {
    alpha: T,
    lambda: T,
    m: T,
    pub solver: SolverConfig<T>,
    pub backward_mode: BackwardMode,
}

impl<T: Real> MolConfig<T> {
    /// Rejects `α ≥ alpha_max(m)`, `λ ≤ 0` and `m ∉ (0, 1)`.
    pub fn new(alpha: T, lambda: T, m: T, solver: SolverConfig<T>, backward_mode: BackwardMode) -> Result<Self> {
        let amax = alpha_max(m.as_f64())?;
        if !(alpha > T::zero()) || alpha.as_f64() >= amax {
            return Err(MolError::invalid(format!(
                "alpha {alpha} must lie in (0, alpha_max(m) = {amax:.6})"
            )));
        }
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(MolError::invalid("lambda must be positive"));
        }
        solver.validate()?;
        Ok(MolConfig {
            alpha,
            lambda,
            m,
            solver,
            backward_mode,
        })
    }

    /// `m = 0.1`, `α = 0.05`, `λ = 1` with default solver settings.
    pub fn defaults() -> Self {
        Self::new(T::lit(0.05), T::one(), T::lit(0.1), SolverConfig::default(), BackwardMode::default())
            .expect("default configuration is valid")
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn m(&self) -> T {
        self.m
    }

    pub(crate) fn step(&self) -> Step<T> {
        Step {
            alpha: self.alpha,
            lambda: self.lambda,
        }
    }
}

/// Unvalidated damping pair; `α = 1` gives the MoDL update.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step<T> {
    pub alpha: T,
    pub lambda: T,
}

/// `(I + c·AᴴA)⁻¹ rhs` by conjugate gradient.
pub(crate) fn resolvent<T: Real>(
    model: &SenseModel<T>,
    c: T,
    rhs: &ComplexImage<T>,
    solver: &SolverConfig<T>,
) -> Result<ComplexImage<T>> {
    rhs.expect_shape(model.image_shape())?;
    conjugate_gradient(
        |v| {
            let mut out = model.gram_unchecked(v);
            out.scale(c);
            out.axpy(T::one(), v);
            out
        },
        rhs,
        solver,
    )
}

pub(crate) fn compute_z_step<T: Real>(
    b: &KSpaceData<T>,
    model: &SenseModel<T>,
    step: Step<T>,
    solver: &SolverConfig<T>,
) -> Result<ComplexImage<T>> {
    let c = step.alpha * step.lambda;
    let mut rhs = model.adjoint(b)?;
    rhs.scale(c);
    resolvent(model, c, &rhs, solver)
}

pub(crate) fn t_step<T: Real>(
    x: &ComplexImage<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    step: Step<T>,
    solver: &SolverConfig<T>,
) -> Result<ComplexImage<T>> {
    x.expect_shape(model.image_shape())?;
    blend_resolve(x, net.forward(x)?, model, step, solver)
}

/// `(I + αλAᴴA)⁻¹((1−α)x + α·hx)` for a precomputed `hx = H(x)`.
pub(crate) fn blend_resolve<T: Real>(
    x: &ComplexImage<T>,
    hx: ComplexImage<T>,
    model: &SenseModel<T>,
    step: Step<T>,
    solver: &SolverConfig<T>,
) -> Result<ComplexImage<T>> {
    let mut blend = hx;
    blend.scale(step.alpha);
    blend.axpy(T::one() - step.alpha, x);
    resolvent(model, step.alpha * step.lambda, &blend, solver)
}

/// `z = (I + αλAᴴA)⁻¹(αλAᴴb)`.
pub fn compute_z<T: Real>(b: &KSpaceData<T>, model: &SenseModel<T>, config: &MolConfig<T>) -> Result<ComplexImage<T>> {
    compute_z_step(b, model, config.step(), &config.solver)
}

/// `(I + αλAᴴA)⁻¹((1−α)x + αH_θ(x))`.
pub fn t_mol<T: Real>(
    x: &ComplexImage<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &MolConfig<T>,
) -> Result<ComplexImage<T>> {
    t_step(x, net, model, config.step(), &config.solver)
}

/// Fixed point of `x ↦ t_mol(x) + z` from `x₀ = Aᴴb`.
pub fn reconstruct_mol<T: Real>(
    b: &KSpaceData<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &MolConfig<T>,
) -> Result<FixedPointResult<T>> {
    reconstruct_mol_from(b, net, model, config, model.adjoint(b)?)
}

pub fn reconstruct_mol_from<T: Real>(
    b: &KSpaceData<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &MolConfig<T>,
    x0: ComplexImage<T>,
) -> Result<FixedPointResult<T>> {
    x0.expect_shape(model.image_shape())?;
    let z = compute_z(b, model, config)?;
    fixed_point_iterate(
        |x| {
            let mut next = t_mol(x, net, model, config)?;
            next.axpy(T::one(), &z);
            Ok(next)
        },
        x0,
        &config.solver,
    )
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::denoiser::{Activation, Architecture, ConstraintMode};
    use crate::imaging::{generate_coil_maps, generate_mask, generate_phantom, MaskKind, PhantomKind, SamplingMask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn full_model(n: usize, coils: usize) -> SenseModel<f64> {
        SenseModel::new(generate_coil_maps(n, n, coils, 3).unwrap(), SamplingMask::full(&[n, n])).unwrap()
    }

    pub fn undersampled_model(n: usize, coils: usize, seed: u64) -> SenseModel<f64> {
        let mask = generate_mask(n, n, 4.0, MaskKind::CartesianVariableDensity, seed, 0.08).unwrap();
        SenseModel::new(generate_coil_maps(n, n, coils, seed).unwrap(), mask).unwrap()
    }

    pub fn phantom_measurements(model: &SenseModel<f64>, seed: u64) -> (ComplexImage<f64>, KSpaceData<f64>) {
        let n = model.image_shape()[0];
        let x = generate_phantom(n.max(16), n.max(16), PhantomKind::SmoothRandom, seed).unwrap();
        let x = if n < 16 {
            ComplexImage::from_fn(n, n, |i, j| x.data()[(i + (16 - n) / 2) * 16 + j + (16 - n) / 2])
        } else {
            x
        };
        let mut b = model.apply(&x).unwrap();
        b.add_noise(model.mask(), 0.01, &mut ChaCha8Rng::seed_from_u64(seed));
        (x, b)
    }

    pub fn random_net(depth: usize, channels: usize, scale: f64, seed: u64) -> DenoiserNet<f64> {
        let arch = Architecture { depth, channels, kernel_size: 3, activation: Activation::Softplus };
        let mut net = DenoiserNet::random(&arch, ConstraintMode::Lr, 0.1, seed).unwrap();
        net.scale_output(scale);
        net
    }

    pub fn tight_solver() -> SolverConfig<f64> {
        SolverConfig {
            fp_tolerance: 1e-12,
            fp_max_iterations: 2000,
            cg_tolerance: 1e-13,
            cg_max_iterations: 200,
            acceleration: Default::default(),
        }
    }
}
