//! Unrolled MoDL, Tikhonov-regularised SENSE, and a common interface over
//! all reconstruction methods for the robustness harness.

use crate::denoiser::{DenoiserNet, ForwardCache, NetGradient};
use crate::imaging::{ComplexImage, KSpaceData};
use crate::linops::SenseModel;
use crate::solvers::{conjugate_gradient, SolverConfig};
use crate::{MolError, Real, Result};

use super::{blend_resolve, compute_z_step, deq_backward, reconstruct_mol, reconstruct_mol_from, resolvent, MolConfig, Step};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModlConfig<T> {
    pub n_unrolls: usize,
    pub lambda: T,
    pub solver: SolverConfig<T>,
}

impl<T: Real> ModlConfig<T> {
    pub fn new(n_unrolls: usize, lambda: T, solver: SolverConfig<T>) -> Result<Self> {
        if n_unrolls == 0 {
            return Err(MolError::invalid("n_unrolls must be at least 1"));
        }
        if !(lambda > T::zero()) {
            return Err(MolError::invalid("lambda must be positive"));
        }
        solver.validate()?;
        Ok(ModlConfig { n_unrolls, lambda, solver })
    }

    fn step(&self) -> Step<T> {
        Step {
            alpha: T::one(),
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModlReconstruction<T> {
    pub x: ComplexImage<T>,
    /// Stored activation count of every unroll (empty unless recording).
    pub ledger: Vec<usize>,
    pub(crate) caches: Vec<ForwardCache<T>>,
}

impl<T> ModlReconstruction<T> {
    /// Total number of stored activation values.
    pub fn ledger_size(&self) -> usize {
        self.ledger.iter().sum()
    }
}

/// `n_unrolls` applications of the `α = 1` update with shared weights,
/// starting from `Aᴴb`. With `record` set every unroll keeps the
/// activations a backward pass needs.
pub fn reconstruct_modl<T: Real>(
    b: &KSpaceData<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &ModlConfig<T>,
    record: bool,
) -> Result<ModlReconstruction<T>> {
    if config.n_unrolls == 0 {
        return Err(MolError::invalid("n_unrolls must be at least 1"));
    }
    let step = config.step();
    let z = compute_z_step(b, model, step, &config.solver)?;
    let mut x = model.adjoint(b)?;
    let mut caches = Vec::new();
    let mut ledger = Vec::new();
    for _ in 0..config.n_unrolls {
        let hx = if record {
            let (hx, cache) = net.forward_cached(&x)?;
            ledger.push(cache.stored_values());
            caches.push(cache);
            hx
        } else {
            net.forward(&x)?
        };
        let mut next = blend_resolve(&x, hx, model, step, &config.solver)?;
        next.axpy(T::one(), &z);
        x = next;
    }
    Ok(ModlReconstruction { x, ledger, caches })
}

/// Reverse pass through a recorded unroll: gradients of `Re⟨g, x_N⟩`.
pub fn modl_backward<T: Real>(
    rec: &ModlReconstruction<T>,
    net: &DenoiserNet<T>,
    model: &SenseModel<T>,
    config: &ModlConfig<T>,
    g: &ComplexImage<T>,
) -> Result<(NetGradient<T>, KSpaceData<T>)> {
    if rec.caches.len() != config.n_unrolls {
        return Err(MolError::invalid("unroll was not recorded"));
    }
    let lambda = config.lambda;
    let mut theta = NetGradient::zeros(net.param_count());
    let mut gz = g.clone();
    let mut gx = g.clone();
    for (k, cache) in rec.caches.iter().enumerate().rev() {
        let w = resolvent(model, lambda, &gx, &config.solver)?;
        let (next, gt) = net.backward(cache, &w, true)?;
        theta.axpy(T::one(), &gt.expect("requested"));
        gx = next;
        if k > 0 {
            gz.axpy(T::one(), &gx);
        }
    }
    // z enters every unroll; x₀ = Aᴴb contributes A·g₀.
    let mut wz = resolvent(model, lambda, &gz, &config.solver)?;
    wz.scale(lambda);
    let mut gb = model.apply(&wz)?;
    gb.axpy(T::one(), &model.apply(&gx)?);
    Ok((theta, gb))
}

/// `(AᴴA + μI)⁻¹Aᴴb` by conjugate gradient.
pub fn reconstruct_sense<T: Real>(
    b: &KSpaceData<T>,
    model: &SenseModel<T>,
    mu: T,
    solver: &SolverConfig<T>,
) -> Result<ComplexImage<T>> {
    if !(mu > T::zero()) {
        return Err(MolError::invalid("mu must be positive"));
    }
    sense_solve(model, mu, &model.adjoint(b)?, solver)
}

fn sense_solve<T: Real>(model: &SenseModel<T>, mu: T, rhs: &ComplexImage<T>, solver: &SolverConfig<T>) -> Result<ComplexImage<T>> {
    conjugate_gradient(
        |v| {
            let mut out = model.gram_unchecked(v);
            out.axpy(mu, v);
            out
        },
        rhs,
        solver,
    )
}

/// A measurement-to-image map with a reverse-mode derivative in `b`.
pub trait Reconstructor<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// `x(b)`. Iterative methods may start from `warm`; the result must not
    /// depend on it beyond solver tolerance.
    fn reconstruct_from(&self, b: &KSpaceData<T>, model: &SenseModel<T>, warm: Option<&ComplexImage<T>>) -> Result<ComplexImage<T>>;

    fn reconstruct(&self, b: &KSpaceData<T>, model: &SenseModel<T>) -> Result<ComplexImage<T>> {
        self.reconstruct_from(b, model, None)
    }

    /// Returns `x(b)` and the gradient of `Re⟨c, x(b)⟩` with respect to `b`,
    /// where `c = cotangent(x(b))`.
    fn reconstruct_with_vjp(
        &self,
        b: &KSpaceData<T>,
        model: &SenseModel<T>,
        cotangent: &dyn Fn(&ComplexImage<T>) -> ComplexImage<T>,
        warm: Option<&ComplexImage<T>>,
    ) -> Result<(ComplexImage<T>, KSpaceData<T>)>;
}

#[derive(Debug, Clone)]
pub struct MolReconstructor<T> {
    pub name: String,
    pub net: DenoiserNet<T>,
    pub config: MolConfig<T>,
}

impl<T: Real> MolReconstructor<T> {
    fn solve(&self, b: &KSpaceData<T>, model: &SenseModel<T>, warm: Option<&ComplexImage<T>>) -> Result<ComplexImage<T>> {
        let res = match warm {
            Some(x0) => reconstruct_mol_from(b, &self.net, model, &self.config, x0.clone())?,
            None => reconstruct_mol(b, &self.net, model, &self.config)?,
        };
        if !res.converged {
            return Err(MolError::FixedPointNotConverged {
                iterations: res.iterations,
                residual: res.residuals.last().copied().unwrap_or(f64::NAN),
            });
        }
        Ok(res.x_star)
    }
}

impl<T: Real> Reconstructor<T> for MolReconstructor<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn reconstruct_from(&self, b: &KSpaceData<T>, model: &SenseModel<T>, warm: Option<&ComplexImage<T>>) -> Result<ComplexImage<T>> {
        self.solve(b, model, warm)
    }

    fn reconstruct_with_vjp(
        &self,
        b: &KSpaceData<T>,
        model: &SenseModel<T>,
        cotangent: &dyn Fn(&ComplexImage<T>) -> ComplexImage<T>,
        warm: Option<&ComplexImage<T>>,
    ) -> Result<(ComplexImage<T>, KSpaceData<T>)> {
        let x = self.solve(b, model, warm)?;
        let g = deq_backward(b, &x, &self.net, model, &self.config, &cotangent(&x))?;
        Ok((x, g.measurement))
    }
}

#[derive(Debug, Clone)]
pub struct ModlReconstructor<T> {
    pub name: String,
    pub net: DenoiserNet<T>,
    pub config: ModlConfig<T>,
}

impl<T: Real> Reconstructor<T> for ModlReconstructor<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn reconstruct_from(&self, b: &KSpaceData<T>, model: &SenseModel<T>, _warm: Option<&ComplexImage<T>>) -> Result<ComplexImage<T>> {
        Ok(reconstruct_modl(b, &self.net, model, &self.config, false)?.x)
    }

    fn reconstruct_with_vjp(
        &self,
        b: &KSpaceData<T>,
        model: &SenseModel<T>,
        cotangent: &dyn Fn(&ComplexImage<T>) -> ComplexImage<T>,
        _warm: Option<&ComplexImage<T>>,
    ) -> Result<(ComplexImage<T>, KSpaceData<T>)> {
        let rec = reconstruct_modl(b, &self.net, model, &self.config, true)?;
        let (_, gb) = modl_backward(&rec, &self.net, model, &self.config, &cotangent(&rec.x))?;
        Ok((rec.x, gb))
    }
}

#[derive(Debug, Clone)]
pub struct SenseReconstructor<T> {
    pub name: String,
    pub mu: T,
    pub solver: SolverConfig<T>,
}

impl<T: Real> Reconstructor<T> for SenseReconstructor<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn reconstruct_from(&self, b: &KSpaceData<T>, model: &SenseModel<T>, _warm: Option<&ComplexImage<T>>) -> Result<ComplexImage<T>> {
        reconstruct_sense(b, model, self.mu, &self.solver)
    }

    fn reconstruct_with_vjp(
        &self,
        b: &KSpaceData<T>,
        model: &SenseModel<T>,
        cotangent: &dyn Fn(&ComplexImage<T>) -> ComplexImage<T>,
        _warm: Option<&ComplexImage<T>>,
    ) -> Result<(ComplexImage<T>, KSpaceData<T>)> {
        let x = self.reconstruct(b, model)?;
        let w = sense_solve(model, self.mu, &cotangent(&x), &self.solver)?;
        Ok((x, model.apply(&w)?))
    }
}
