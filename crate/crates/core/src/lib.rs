//! Monotone operator learning (MOL) for undersampled multi-coil Fourier imaging.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`] – complex image containers, centered orthonormal FFTs,
//!   synthetic phantoms, coil maps, sampling masks, metrics and the on-disk
//!   array container.
//! * [`linops`] – the SENSE forward model `A = M∘F∘S`, its adjoint and normal
//!   operator.
//! * [`solvers`] – conjugate gradient, Picard fixed-point iteration and the
//!   closed-form step-size / contraction calculators.
//! * [`denoiser`] – the residual CNN `H_θ` with hand-written reverse mode,
//!   spectral normalisation and local Lipschitz / monotonicity probes.
//! * [`mol`] – the damped forward–backward iteration, implicit
//!   differentiation, log-barrier training and the unrolled / SENSE baselines.
//! * [`robustness`] – Gaussian and adversarial measurement perturbations,
//!   the stability bound and the PSNR-versus-ε sweep.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common double-precision case.

pub mod denoiser;
pub mod error;
pub mod imaging;
pub mod linops;
pub mod mol;
pub mod robustness;
pub mod scalar;
pub mod solvers;

pub use error::{MolError, Result};
pub use scalar::Real;

pub use num_complex::Complex;

pub type ComplexImage64 = imaging::ComplexImage<f64>;
pub type ComplexImage32 = imaging::ComplexImage<f32>;
pub type KSpaceData64 = imaging::KSpaceData<f64>;
pub type KSpaceData32 = imaging::KSpaceData<f32>;
pub type CoilMaps64 = imaging::CoilMaps<f64>;
pub type SenseModel64 = linops::SenseModel<f64>;
pub type SenseModel32 = linops::SenseModel<f32>;
pub type DenoiserNet64 = denoiser::DenoiserNet<f64>;
pub type DenoiserNet32 = denoiser::DenoiserNet<f32>;
pub type MolConfig64 = mol::MolConfig<f64>;
pub type SolverConfig64 = solvers::SolverConfig<f64>;
pub type FixedPointResult64 = solvers::FixedPointResult<f64>;
