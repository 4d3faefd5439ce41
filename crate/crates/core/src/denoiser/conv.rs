//! Same-padded 2-D convolution on channel-major planes (`ch × H × W`).
//!
//! Kernels are laid out `(out_ch, in_ch, k, k)`. All loops run along image
//! rows so the innermost operation is a contiguous multiply-add.

use crate::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Row/column ranges of valid output positions for tap offset `(dy, dx)`.
    fn window(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        let y0 = (-dy).max(0) as usize;
        let y1 = (h - dy).min(h).max(0) as usize;
        let x0 = (-dx).max(0) as usize;
        let x1 = (w - dx).min(w).max(0) as usize;
        (y0, y1, x0, x1)
    }
}

#[inline]
fn axpy_row<T: Real>(out: &mut [T], a: T, src: &[T]) {
    for (o, s) in out.iter_mut().zip(src) {
        *o = *o + a * *s;
    }
}

#[inline]
fn dot_row<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// `out[o] = bias[o] + Σ_i kernel[o,i] ⋆ input[i]`.
pub(crate) fn forward<T: Real>(
    s: ConvShape,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = s.h * s.w;
    let p = s.pad();
    debug_assert_eq!(input.len(), s.in_ch * hw);
    debug_assert_eq!(out.len(), s.out_ch * hw);
    for o in 0..s.out_ch {
        let plane = &mut out[o * hw..(o + 1) * hw];
        let b = bias.map_or(T::zero(), |b| b[o]);
        plane.iter_mut().for_each(|v| *v = b);
        for i in 0..s.in_ch {
            let src = &input[i * hw..(i + 1) * hw];
            let taps = &kernel[(o * s.in_ch + i) * s.k * s.k..(o * s.in_ch + i + 1) * s.k * s.k];
            for ky in 0..s.k {
                let dy = ky as isize - p;
                for kx in 0..s.k {
                    let wv = taps[ky * s.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let dx = kx as isize - p;
                    let (y0, y1, x0, x1) = s.window(dy, dx);
                    for y in y0..y1 {
                        let yy = (y as isize + dy) as usize;
                        let xs = (x0 as isize + dx) as usize;
                        axpy_row(
                            &mut plane[y * s.w + x0..y * s.w + x1],
                            wv,
                            &src[yy * s.w + xs..yy * s.w + xs + (x1 - x0)],
                        );
                    }
                }
            }
        }
    }
}

/// Adjoint of the linear part of [`forward`]: `gin = Kᵀ gout` (overwrites).
pub(crate) fn backward_input<T: Real>(s: ConvShape, gout: &[T], kernel: &[T], gin: &mut [T]) {
    let hw = s.h * s.w;
    let p = s.pad();
    gin.iter_mut().for_each(|v| *v = T::zero());
    for o in 0..s.out_ch {
        let g = &gout[o * hw..(o + 1) * hw];
        for i in 0..s.in_ch {
            let dst = &mut gin[i * hw..(i + 1) * hw];
            let taps = &kernel[(o * s.in_ch + i) * s.k * s.k..(o * s.in_ch + i + 1) * s.k * s.k];
            for ky in 0..s.k {
                let dy = ky as isize - p;
                for kx in 0..s.k {
                    let wv = taps[ky * s.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let dx = kx as isize - p;
                    let (y0, y1, x0, x1) = s.window(dy, dx);
                    for y in y0..y1 {
                        let yy = (y as isize + dy) as usize;
                        let xs = (x0 as isize + dx) as usize;
                        axpy_row(
                            &mut dst[yy * s.w + xs..yy * s.w + xs + (x1 - x0)],
                            wv,
                            &g[y * s.w + x0..y * s.w + x1],
                        );
                    }
                }
            }
        }
    }
}

/// Accumulates `∂⟨gout, K⋆input⟩/∂K` into `gk` and `Σ gout` into `gb`.
pub(crate) fn backward_params<T: Real>(
    s: ConvShape,
    input: &[T],
    gout: &[T],
    gk: &mut [T],
    gb: &mut [T],
) {
    let hw = s.h * s.w;
    let p = s.pad();
    for o in 0..s.out_ch {
        let g = &gout[o * hw..(o + 1) * hw];
        gb[o] = gb[o] + g.iter().copied().sum::<T>();
        for i in 0..s.in_ch {
            let src = &input[i * hw..(i + 1) * hw];
            let base = (o * s.in_ch + i) * s.k * s.k;
            for ky in 0..s.k {
                let dy = ky as isize - p;
                for kx in 0..s.k {
                    let dx = kx as isize - p;
                    let (y0, y1, x0, x1) = s.window(dy, dx);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let yy = (y as isize + dy) as usize;
                        let xs = (x0 as isize + dx) as usize;
                        acc = acc
                            + dot_row(
                                &g[y * s.w + x0..y * s.w + x1],
                                &src[yy * s.w + xs..yy * s.w + xs + (x1 - x0)],
                            );
                    }
                    gk[base + ky * s.k + kx] = gk[base + ky * s.k + kx] + acc;
                }
            }
        }
    }
}
