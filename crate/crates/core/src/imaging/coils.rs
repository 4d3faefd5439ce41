use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{MolError, Real, Result};

/// Coil sensitivity profiles of shape `(C, H, W)`, normalised so that
/// `Σ_c |S_c|² = 1` at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps<T> {
    ncoils: usize,
    height: usize,
    width: usize,
    data: Vec<Complex<T>>,
    /// Width of the Gaussian coil profiles in normalised FOV units.
    pub smoothness: T,
}

impl<T: Real> CoilMaps<T> {
    pub fn new(
        ncoils: usize,
        height: usize,
        width: usize,
        data: Vec<Complex<T>>,
        smoothness: T,
    ) -> Result<Self> {
        if ncoils == 0 || height == 0 || width == 0 {
            return Err(MolError::invalid("coil maps need positive extents"));
        }
        if data.len() != ncoils * height * width {
            return Err(MolError::ShapeMismatch {
                expected: vec![ncoils, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(CoilMaps {
            ncoils,
            height,
            width,
            data,
            smoothness,
        })
    }

    /// A single coil with unit sensitivity everywhere.
    pub fn uniform(height: usize, width: usize) -> Self {
        CoilMaps {
            ncoils: 1,
            height,
            width,
            data: vec![Complex::new(T::one(), T::zero()); height * width],
            smoothness: T::infinity(),
        }
    }

    pub fn ncoils(&self) -> usize {
        self.ncoils
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.ncoils, self.height, self.width]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn coil(&self, c: usize) -> &[Complex<T>] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-pixel sum of squared magnitudes over coils.
    pub fn sum_of_squares(&self) -> Vec<T> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| (0..self.ncoils).map(|c| self.data[c * n + p].norm_sqr()).sum())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> CoilMaps<U> {
        CoilMaps {
            ncoils: self.ncoils,
            height: self.height,
            width: self.width,
            data: super::cast_slice(&self.data),
            smoothness: U::lit(self.smoothness.as_f64()),
        }
    }
}

/// Gaussian coil profiles centred on a ring just outside the field of view,
/// each with a gentle linear phase, normalised to unit sum of squares.
pub fn generate_coil_maps<T: Real>(
    height: usize,
    width: usize,
    ncoils: usize,
    seed: u64,
) -> Result<CoilMaps<T>> {
    if ncoils < 1 {
        return Err(MolError::invalid("at least one coil is required"));
    }
    if height == 0 || width == 0 {
        return Err(MolError::invalid("coil maps need positive extents"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.9;
    let ring = 1.1;
    let offset: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let coils: Vec<(f64, f64, f64, f64, f64)> = (0..ncoils)
        .map(|c| {
            let theta = offset + std::f64::consts::TAU * c as f64 / ncoils as f64;
            (
                ring * theta.cos(),
                ring * theta.sin(),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
        })
        .collect();
    let n = height * width;
    let mut raw = vec![Complex::new(0.0f64, 0.0); ncoils * n];
    for i in 0..height {
        for j in 0..width {
            let x = (j as f64 - (width / 2) as f64) / (width as f64 / 2.0);
            let y = ((height / 2) as f64 - i as f64) / (height as f64 / 2.0);
            for (c, &(cx, cy, kx, ky, ph)) in coils.iter().enumerate() {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let amp = (-d2 / (2.0 * sigma * sigma)).exp();
                raw[c * n + i * width + j] = Complex::from_polar(amp, kx * x + ky * y + ph);
            }
        }
    }
    for p in 0..n {
        let sos: f64 = (0..ncoils).map(|c| raw[c * n + p].norm_sqr()).sum();
        let inv = 1.0 / sos.sqrt();
        for c in 0..ncoils {
            raw[c * n + p] *= inv;
        }
    }
    let data = raw
        .iter()
        .map(|z| Complex::new(T::lit(z.re), T::lit(z.im)))
        .collect();
    Ok(CoilMaps {
        ncoils,
        height,
        width,
        data,
        smoothness: T::lit(sigma),
    })
}
