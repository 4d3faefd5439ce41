use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::ComplexImage;
use crate::{MolError, Real, Result};

/// Planned centered, orthonormal 2-D DFT for one `H×W` frame.
///
/// The zero frequency sits at index `⌊N/2⌋` along each axis, on both the
/// image and the k-space side, which also fixes the convention for odd sizes.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: T::one() / T::of_usize(height * width).sqrt(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place forward transform of a contiguous `H×W` buffer.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, &self.row_fwd, &self.col_fwd);
    }

    /// In-place inverse transform of a contiguous `H×W` buffer.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, &self.row_inv, &self.col_inv);
    }

    fn transform(&self, buf: &mut [Complex<T>], row: &Arc<dyn Fft<T>>, col: &Arc<dyn Fft<T>>) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        centered_rows(buf, w, row.as_ref());
        let mut t = transpose(buf, h, w);
        centered_rows(&mut t, h, col.as_ref());
        transpose_into(&t, w, h, buf);
        for z in buf.iter_mut() {
            *z = *z * self.scale;
        }
    }
}

fn centered_rows<T: Real>(buf: &mut [Complex<T>], n: usize, fft: &dyn Fft<T>) {
    let c = n / 2;
    for row in buf.chunks_exact_mut(n) {
        row.rotate_left(c);
    }
    fft.process(buf);
    for row in buf.chunks_exact_mut(n) {
        row.rotate_right(c);
    }
}

fn transpose<T: Real>(buf: &[Complex<T>], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut out = vec![Complex::new(T::zero(), T::zero()); h * w];
    transpose_into(buf, h, w, &mut out);
    out
}

fn transpose_into<T: Copy>(src: &[T], h: usize, w: usize, dst: &mut [T]) {
    for i in 0..h {
        for j in 0..w {
            dst[j * h + i] = src[i * w + j];
        }
    }
}

fn framewise<T: Real>(img: &ComplexImage<T>, inverse: bool) -> Result<ComplexImage<T>> {
    if !img.is_finite() {
        return Err(MolError::NonFinite("fft input"));
    }
    let (h, w) = (img.height(), img.width());
    let plan = Fft2::new(h, w);
    let mut out = img.clone();
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for t in 0..img.frames() {
        img.gather_frame(t, &mut buf);
        if inverse {
            plan.inverse(&mut buf);
        } else {
            plan.forward(&mut buf);
        }
        out.scatter_frame(t, &buf);
    }
    Ok(out)
}

/// Centered orthonormal 2-D DFT, applied frame by frame for `H×W×T` input.
pub fn fft2c<T: Real>(img: &ComplexImage<T>) -> Result<ComplexImage<T>> {
    framewise(img, false)
}

/// Inverse of [`fft2c`].
pub fn ifft2c<T: Real>(ksp: &ComplexImage<T>) -> Result<ComplexImage<T>> {
    framewise(ksp, true)
}
