//! Image-domain and k-space containers plus everything needed to synthesise
//! undersampled multi-coil acquisitions.

mod coils;
mod fft;
pub mod io;
mod mask;
mod metrics;
mod phantom;
mod synth;

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{MolError, Real, Result};

pub use coils::{generate_coil_maps, CoilMaps};
pub use fft::{fft2c, ifft2c, Fft2};
pub use mask::{generate_dynamic_mask, generate_mask, MaskKind, SamplingMask};
pub use metrics::{nrmse, psnr, psnr_capped, PSNR_CAP};
pub use phantom::{generate_phantom, PhantomKind};
pub use synth::{synthesize, synthesize_set, AcquisitionSpec};

/// Complex image of shape `(H, W)` or `(H, W, T)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage<T> {
    shape: Vec<usize>,
    data: Vec<Complex<T>>,
}

pub(crate) fn check_image_shape(shape: &[usize]) -> Result<()> {
    if !(shape.len() == 2 || shape.len() == 3) || shape.iter().any(|&d| d == 0) {
        return Err(MolError::invalid(format!(
            "image shape must be (H, W) or (H, W, T) with positive extents, got {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Real> ComplexImage<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexImage {
            shape: shape.to_vec(),
            data: vec![Complex::new(T::zero(), T::zero()); n],
        }
    }

    /// Builds an image from raw data, rejecting inconsistent shapes and
    /// non-finite entries.
    pub fn from_vec(shape: Vec<usize>, data: Vec<Complex<T>>) -> Result<Self> {
        check_image_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MolError::invalid(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        let img = ComplexImage { shape, data };
        if !img.is_finite() {
            return Err(MolError::NonFinite("image"));
        }
        Ok(img)
    }

    /// Unchecked constructor for internal hot paths where the shape is known.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Complex<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        ComplexImage { shape, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        ComplexImage {
            shape: vec![height, width],
            data,
        }
    }

    /// Standard complex Gaussian entries (unit variance per real component).
    pub fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(T::lit(re), T::lit(im))
            })
            .collect();
        ComplexImage {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn height(&self) -> usize {
        self.shape[0]
    }

    pub fn width(&self) -> usize {
        self.shape[1]
    }

    /// Number of time frames (1 for a static image).
    pub fn frames(&self) -> usize {
        self.shape.get(2).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm_sqr(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    /// `⟨self, other⟩ = Σ conj(self)·other`.
    pub fn dot(&self, other: &Self) -> Complex<T> {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .fold(Complex::new(T::zero(), T::zero()), |acc, v| acc + v)
    }

    /// Real inner product `Re⟨self, other⟩`.
    pub fn re_dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .map(|z| z.norm())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    pub fn scale(&mut self, s: T) {
        for z in &mut self.data {
            *z = *z * s;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += a·x`.
    pub fn axpy(&mut self, a: T, x: &Self) {
        debug_assert_eq!(self.shape, x.shape);
        for (y, v) in self.data.iter_mut().zip(&x.data) {
            *y = *y + *v * a;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    /// Same shape check used at every operator boundary.
    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(MolError::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ComplexImage<U> {
        ComplexImage {
            shape: self.shape.clone(),
            data: cast_slice(&self.data),
        }
    }

    /// Copies frame `t` into a contiguous `H×W` buffer.
    pub(crate) fn gather_frame(&self, t: usize, out: &mut [Complex<T>]) {
        gather_frame(&self.data, self.frames(), t, out);
    }

    pub(crate) fn scatter_frame(&mut self, t: usize, src: &[Complex<T>]) {
        let frames = self.frames();
        scatter_frame(&mut self.data, frames, t, src);
    }

    /// Extracts frame `t` as a 2-D image.
    pub fn frame(&self, t: usize) -> ComplexImage<T> {
        let (h, w) = (self.height(), self.width());
        let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
        self.gather_frame(t, &mut buf);
        ComplexImage::from_parts(vec![h, w], buf)
    }
}

pub(crate) fn cast_slice<T: Real, U: Real>(data: &[Complex<T>]) -> Vec<Complex<U>> {
    data.iter()
        .map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64())))
        .collect()
}

pub(crate) fn gather_frame<T: Copy>(data: &[T], frames: usize, t: usize, out: &mut [T]) {
    if frames == 1 {
        out.copy_from_slice(&data[..out.len()]);
    } else {
        for (p, o) in out.iter_mut().enumerate() {
            *o = data[p * frames + t];
        }
    }
}

pub(crate) fn scatter_frame<T: Copy>(data: &mut [T], frames: usize, t: usize, src: &[T]) {
    if frames == 1 {
        data[..src.len()].copy_from_slice(src);
    } else {
        for (p, s) in src.iter().enumerate() {
            data[p * frames + t] = *s;
        }
    }
}

/// Multi-coil measurements of shape `(C, H, W)` or `(C, H, W, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData<T> {
    shape: Vec<usize>,
    data: Vec<Complex<T>>,
    /// Standard deviation of the complex white noise per real component.
    pub noise_sigma: T,
}

impl<T: Real> KSpaceData<T> {
    pub fn zeros(ncoils: usize, image_shape: &[usize]) -> Self {
        let mut shape = vec![ncoils];
        shape.extend_from_slice(image_shape);
        let n = shape.iter().product();
        KSpaceData {
            shape,
            data: vec![Complex::new(T::zero(), T::zero()); n],
            noise_sigma: T::zero(),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<Complex<T>>, noise_sigma: T) -> Result<Self> {
        if !(shape.len() == 3 || shape.len() == 4) || shape.iter().any(|&d| d == 0) {
            return Err(MolError::invalid(format!(
                "k-space shape must be (C, H, W) or (C, H, W, T), got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MolError::invalid(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if noise_sigma < T::zero() || !noise_sigma.is_finite() {
            return Err(MolError::invalid("noise sigma must be finite and non-negative"));
        }
        if data.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(MolError::NonFinite("k-space"));
        }
        Ok(KSpaceData {
            shape,
            data,
            noise_sigma,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ncoils(&self) -> usize {
        self.shape[0]
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn coil(&self, c: usize) -> &[Complex<T>] {
        let n = self.data.len() / self.ncoils();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn coil_mut(&mut self, c: usize) -> &mut [Complex<T>] {
        let n = self.data.len() / self.ncoils();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn norm_sqr(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    /// `Σ conj(self)·other`.
    pub fn dot(&self, other: &Self) -> Complex<T> {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .fold(Complex::new(T::zero(), T::zero()), |acc, v| acc + v)
    }

    pub fn re_dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn axpy(&mut self, a: T, x: &Self) {
        for (y, v) in self.data.iter_mut().zip(&x.data) {
            *y = *y + *v * a;
        }
    }

    pub fn scale(&mut self, s: T) {
        for z in &mut self.data {
            *z = *z * s;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    pub fn cast<U: Real>(&self) -> KSpaceData<U> {
        KSpaceData {
            shape: self.shape.clone(),
            data: cast_slice(&self.data),
            noise_sigma: U::lit(self.noise_sigma.as_f64()),
        }
    }

    /// Adds complex white Gaussian noise of standard deviation `sigma` on the
    /// sampled locations only.
    pub fn add_noise<R: Rng + ?Sized>(&mut self, mask: &SamplingMask, sigma: T, rng: &mut R) {
        let per_coil = self.data.len() / self.ncoils();
        for c in 0..self.ncoils() {
            let coil = &mut self.data[c * per_coil..(c + 1) * per_coil];
            for (z, &m) in coil.iter_mut().zip(mask.data()) {
                if m {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *z = *z + Complex::new(T::lit(re), T::lit(im)) * sigma;
                }
            }
        }
        self.noise_sigma = sigma;
    }
}
