//! Matrix-free SENSE forward model `A = M∘F∘S`, its adjoint and normal
//! operator.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imaging::{CoilMaps, ComplexImage, Fft2, KSpaceData, SamplingMask};
use crate::{MolError, Real, Result};

/// Coil maps, sampling mask and a planned FFT for one acquisition geometry.
///
/// For dynamic images the maps are shared by every frame while the mask may
/// vary per frame.
#[derive(Debug, Clone)]
pub struct SenseModel<T: Real> {
    maps: CoilMaps<T>,
    mask: SamplingMask,
    image_shape: Vec<usize>,
    fft: Fft2<T>,
}

impl<T: Real> SenseModel<T> {
    pub fn new(maps: CoilMaps<T>, mask: SamplingMask) -> Result<Self> {
        let image_shape = mask.shape();
        if maps.height() != mask.height() || maps.width() != mask.width() {
            return Err(MolError::ShapeMismatch {
                expected: image_shape[..2].to_vec(),
                actual: vec![maps.height(), maps.width()],
            });
        }
        let fft = Fft2::new(mask.height(), mask.width());
        Ok(SenseModel {
            maps,
            mask,
            image_shape,
            fft,
        })
    }

    pub fn maps(&self) -> &CoilMaps<T> {
        &self.maps
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn ncoils(&self) -> usize {
        self.maps.ncoils()
    }

    pub fn kspace_shape(&self) -> Vec<usize> {
        let mut s = vec![self.ncoils()];
        s.extend_from_slice(&self.image_shape);
        s
    }

    fn frame_len(&self) -> usize {
        self.image_shape[0] * self.image_shape[1]
    }

    fn frames(&self) -> usize {
        self.image_shape.get(2).copied().unwrap_or(1)
    }

    fn zero_buf(&self) -> Vec<Complex<T>> {
        vec![Complex::new(T::zero(), T::zero()); self.frame_len()]
    }

    /// `b_c = M ⊙ F(S_c ⊙ x)` for every coil and frame.
    pub fn apply(&self, x: &ComplexImage<T>) -> Result<KSpaceData<T>> {
        x.expect_shape(&self.image_shape)?;
        let frames = self.frames();
        let mut out = KSpaceData::zeros(self.ncoils(), &self.image_shape);
        let mut buf = self.zero_buf();
        let mut frame = self.zero_buf();
        let mut mask_frame = vec![false; self.frame_len()];
        for t in 0..frames {
            x.gather_frame(t, &mut frame);
            crate::imaging::gather_frame(self.mask.data(), frames, t, &mut mask_frame);
            for c in 0..self.ncoils() {
                for ((b, &s), &v) in buf.iter_mut().zip(self.maps.coil(c)).zip(&frame) {
                    *b = s * v;
                }
                self.fft.forward(&mut buf);
                for (b, &m) in buf.iter_mut().zip(&mask_frame) {
                    if !m {
                        *b = Complex::new(T::zero(), T::zero());
                    }
                }
                crate::imaging::scatter_frame(out.coil_mut(c), frames, t, &buf);
            }
        }
        Ok(out)
    }

    /// `Σ_c conj(S_c) ⊙ F⁻¹(M ⊙ b_c)`.
    pub fn adjoint(&self, b: &KSpaceData<T>) -> Result<ComplexImage<T>> {
        if b.shape() != self.kspace_shape().as_slice() {
            return Err(MolError::ShapeMismatch {
                expected: self.kspace_shape(),
                actual: b.shape().to_vec(),
            });
        }
        let frames = self.frames();
        let mut out = ComplexImage::zeros(&self.image_shape);
        let mut buf = self.zero_buf();
        let mut acc = self.zero_buf();
        let mut mask_frame = vec![false; self.frame_len()];
        for t in 0..frames {
            crate::imaging::gather_frame(self.mask.data(), frames, t, &mut mask_frame);
            acc.iter_mut().for_each(|z| *z = Complex::new(T::zero(), T::zero()));
            for c in 0..self.ncoils() {
                crate::imaging::gather_frame(b.coil(c), frames, t, &mut buf);
                for (v, &m) in buf.iter_mut().zip(&mask_frame) {
                    if !m {
                        *v = Complex::new(T::zero(), T::zero());
                    }
                }
                self.fft.inverse(&mut buf);
                for ((a, &s), &v) in acc.iter_mut().zip(self.maps.coil(c)).zip(&buf) {
                    *a = *a + s.conj() * v;
                }
            }
            out.scatter_frame(t, &acc);
        }
        Ok(out)
    }

    /// `A^H A x` using a single coil-sized work buffer.
    pub fn gram(&self, x: &ComplexImage<T>) -> Result<ComplexImage<T>> {
        x.expect_shape(&self.image_shape)?;
        Ok(self.gram_unchecked(x))
    }

    pub(crate) fn gram_unchecked(&self, x: &ComplexImage<T>) -> ComplexImage<T> {
        let frames = self.frames();
        let mut out = ComplexImage::zeros(&self.image_shape);
        let mut buf = self.zero_buf();
        let mut frame = self.zero_buf();
        let mut acc = self.zero_buf();
        let mut mask_frame = vec![false; self.frame_len()];
        for t in 0..frames {
            x.gather_frame(t, &mut frame);
            crate::imaging::gather_frame(self.mask.data(), frames, t, &mut mask_frame);
            acc.iter_mut().for_each(|z| *z = Complex::new(T::zero(), T::zero()));
            for c in 0..self.ncoils() {
                let coil = self.maps.coil(c);
                for ((b, &s), &v) in buf.iter_mut().zip(coil).zip(&frame) {
                    *b = s * v;
                }
                self.fft.forward(&mut buf);
                for (b, &m) in buf.iter_mut().zip(&mask_frame) {
                    if !m {
                        *b = Complex::new(T::zero(), T::zero());
                    }
                }
                self.fft.inverse(&mut buf);
                for ((a, &s), &v) in acc.iter_mut().zip(coil).zip(&buf) {
                    *a = *a + s.conj() * v;
                }
            }
            out.scatter_frame(t, &acc);
        }
        out
    }

    /// Largest eigenvalue of `A^H A` by power iteration (equals `‖A‖²`).
    pub fn gram_norm_estimate(&self, iterations: usize, seed: u64) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = ComplexImage::<T>::random(&self.image_shape, &mut rng);
        let n = v.norm();
        v.scale(T::one() / n);
        let mut lambda = T::zero();
        for _ in 0..iterations {
            let w = self.gram_unchecked(&v);
            lambda = w.norm();
            if lambda == T::zero() {
                return T::zero();
            }
            v = w.scaled(T::one() / lambda);
        }
        lambda
    }
}

pub fn sense_apply<T: Real>(x: &ComplexImage<T>, model: &SenseModel<T>) -> Result<KSpaceData<T>> {
    model.apply(x)
}

pub fn sense_adjoint<T: Real>(b: &KSpaceData<T>, model: &SenseModel<T>) -> Result<ComplexImage<T>> {
    model.adjoint(b)
}

pub fn gram_apply<T: Real>(x: &ComplexImage<T>, model: &SenseModel<T>) -> Result<ComplexImage<T>> {
    model.gram(x)
}

/// Worst relative adjoint defect `|⟨Ax,y⟩ − ⟨x,Bᴴy⟩| / (‖Ax‖‖y‖)` of an
/// arbitrary operator pair over random complex probes.
pub fn adjoint_mismatch<T, F, G>(
    image_shape: &[usize],
    kspace_shape: &[usize],
    forward: F,
    adjoint: G,
    trials: usize,
    seed: u64,
) -> Result<f64>
where
    T: Real,
    F: Fn(&ComplexImage<T>) -> Result<KSpaceData<T>>,
    G: Fn(&KSpaceData<T>) -> Result<ComplexImage<T>>,
{
    if trials == 0 {
        return Err(MolError::invalid("no trials"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = ComplexImage::<T>::random(image_shape, &mut rng);
        let yk = ComplexImage::<T>::random(kspace_shape, &mut rng);
        let y = KSpaceData::from_vec(kspace_shape.to_vec(), yk.into_data(), T::zero())?;
        let ax = forward(&x)?;
        let ahy = adjoint(&y)?;
        let lhs = ax.dot(&y);
        let rhs = x.dot(&ahy);
        let denom = (ax.norm() * y.norm()).as_f64();
        let defect = (lhs - rhs).norm().as_f64();
        let rel = if denom > 0.0 { defect / denom } else { defect };
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// [`adjoint_mismatch`] for the model's own `A` / `A^H` pair.
pub fn adjoint_test<T: Real>(model: &SenseModel<T>, trials: usize, seed: u64) -> Result<f64> {
    adjoint_mismatch(
        model.image_shape(),
        &model.kspace_shape(),
        |x| model.apply(x),
        |y| model.adjoint(y),
        trials,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{fft2c, generate_coil_maps, generate_mask, ifft2c, MaskKind};

    fn model(n: usize, coils: usize, kind: MaskKind, seed: u64) -> SenseModel<f64> {
        let maps = generate_coil_maps(n, n, coils, seed).unwrap();
        let mask = generate_mask(n, n, 4.0, kind, seed, 0.08).unwrap();
        SenseModel::new(maps, mask).unwrap()
    }

    fn full_model(n: usize, coils: usize) -> SenseModel<f64> {
        let maps = generate_coil_maps(n, n, coils, 3).unwrap();
        SenseModel::new(maps, SamplingMask::full(&[n, n])).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let m = model(16, 4, MaskKind::Uniform, 1);
        let b = m.apply(&ComplexImage::zeros(&[16, 16])).unwrap();
        assert_eq!(b.norm(), 0.0);
        let x = m.adjoint(&KSpaceData::zeros(4, &[16, 16])).unwrap();
        assert_eq!(x.norm(), 0.0);
    }

    #[test]
    fn single_uniform_coil_reduces_to_fft() {
        let m = SenseModel::new(CoilMaps::<f64>::uniform(8, 8), SamplingMask::full(&[8, 8])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ComplexImage::<f64>::random(&[8, 8], &mut rng);
        let b = m.apply(&x).unwrap();
        let f = fft2c(&x).unwrap();
        for (a, e) in b.data().iter().zip(f.data()) {
            assert!((a - e).norm() < 1e-14);
        }
        let back = m.adjoint(&b).unwrap();
        let inv = ifft2c(&f).unwrap();
        assert!(back.sub(&inv).norm() < 1e-12);
    }

    #[test]
    fn full_sampling_is_an_isometry() {
        let m = full_model(32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ComplexImage::<f64>::random(&[32, 32], &mut rng);
        let ax = m.apply(&x).unwrap();
        assert!(((ax.norm() - x.norm()) / x.norm()).abs() < 1e-6);
        let g = m.gram(&x).unwrap();
        assert!(g.sub(&x).norm() / x.norm() < 1e-6);
    }

    #[test]
    fn empty_mask_gram_is_zero() {
        let maps = generate_coil_maps::<f64>(16, 16, 4, 1).unwrap();
        let m = SenseModel::new(maps, SamplingMask::empty(&[16, 16])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ComplexImage::<f64>::random(&[16, 16], &mut rng);
        assert_eq!(m.gram(&x).unwrap().norm(), 0.0);
    }

    #[test]
    fn adjoint_identity_across_configurations() {
        for &n in &[15usize, 16, 64] {
            for &c in &[1usize, 4, 12] {
                for kind in MaskKind::ALL {
                    let m = model(n, c, kind, (n + c) as u64);
                    let err = adjoint_test(&m, 4, 9).unwrap();
                    assert!(err < 1e-10, "n={n} c={c} {kind:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn conjugate_dropped_adjoint_is_detected() {
        let m = model(16, 4, MaskKind::CartesianVariableDensity, 7);
        let broken = |y: &KSpaceData<f64>| -> Result<ComplexImage<f64>> {
            let mut out = ComplexImage::zeros(&[16, 16]);
            for c in 0..m.ncoils() {
                let mut buf = y.coil(c).to_vec();
                for (v, &mk) in buf.iter_mut().zip(m.mask().data()) {
                    if !mk {
                        *v = Complex::new(0.0, 0.0);
                    }
                }
                m.fft.inverse(&mut buf);
                for ((o, &s), v) in out.data_mut().iter_mut().zip(m.maps().coil(c)).zip(buf) {
                    *o += s * v;
                }
            }
            Ok(out)
        };
        let err = adjoint_mismatch(&[16, 16], &m.kspace_shape(), |x| m.apply(x), broken, 20, 1).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn no_trials_is_an_error() {
        let m = model(16, 1, MaskKind::Uniform, 0);
        assert!(adjoint_test(&m, 0, 0).is_err());
    }

    #[test]
    fn gram_is_self_adjoint_and_psd() {
        let m = model(16, 4, MaskKind::PoissonDensity, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = ComplexImage::<f64>::random(&[16, 16], &mut rng);
            let y = ComplexImage::<f64>::random(&[16, 16], &mut rng);
            let lhs = m.gram(&x).unwrap().dot(&y);
            let rhs = x.dot(&m.gram(&y).unwrap());
            assert!((lhs - rhs).norm() / (x.norm() * y.norm()) < 1e-10);
            assert!(x.re_dot(&m.gram(&x).unwrap()) >= 0.0);
        }
    }

    #[test]
    fn operator_norm_bounded_by_one() {
        for kind in MaskKind::ALL {
            let m = model(16, 4, kind, 3);
            let n = m.gram_norm_estimate(100, 1);
            assert!(n <= 1.0 + 1e-3, "{kind:?}: {n}");
        }
    }

    #[test]
    fn undersampled_gram_has_a_null_direction() {
        let m = model(32, 4, MaskKind::CartesianVariableDensity, 4);
        let p = m.mask().data().iter().position(|&s| !s).unwrap();
        // A pure unsampled frequency, demodulated by one coil, is nearly
        // annihilated once the smooth maps are applied.
        let mut k = ComplexImage::<f64>::zeros(&[32, 32]);
        k.data_mut()[p] = Complex::new(1.0, 0.0);
        let x = ifft2c(&k).unwrap();
        let g = m.gram(&x).unwrap();
        assert!(g.norm() < 0.5 * x.norm(), "{}", g.norm());
    }

    #[test]
    fn dynamic_frames_use_their_own_mask() {
        let maps = generate_coil_maps::<f64>(16, 16, 2, 1).unwrap();
        let mask = crate::imaging::generate_dynamic_mask(16, 16, 3, 4.0, MaskKind::Uniform, 2, 0.1, true)
            .unwrap();
        let m = SenseModel::new(maps.clone(), mask.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ComplexImage::<f64>::random(&[16, 16, 3], &mut rng);
        let b = m.apply(&x).unwrap();
        for t in 0..3 {
            let fm = SamplingMask::new(&[16, 16], mask.frame(t), 4.0, MaskKind::Uniform).unwrap();
            let single = SenseModel::new(maps.clone(), fm).unwrap();
            let bt = single.apply(&x.frame(t)).unwrap();
            for c in 0..2 {
                let mut got = vec![Complex::new(0.0, 0.0); 256];
                crate::imaging::gather_frame(b.coil(c), 3, t, &mut got);
                for (g, e) in got.iter().zip(bt.coil(c)) {
                    assert!((g - e).norm() < 1e-14);
                }
            }
        }
        assert!(adjoint_test(&m, 3, 2).unwrap() < 1e-10);
    }
}
