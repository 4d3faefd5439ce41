//! Layer-wise spectral normalisation of the convolution stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{conv, ConvLayer, DenoiserNet};
use crate::{MolError, Real, Result};

/// Grid size on which convolution operator norms are measured.
pub const SN_REFERENCE_SIZE: usize = 32;

const MAX_ROUNDS: usize = 50;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Operator norm of the linear part of `layer` on a `size×size` grid with
/// zero padding, by power iteration on `KᵀK`.
///
/// `init` warm-starts the iteration and is overwritten with the final
/// right singular vector estimate.
pub fn conv_operator_norm<T: Real>(
    layer: &ConvLayer<T>,
    size: usize,
    iters: usize,
    init: &mut Option<Vec<T>>,
) -> Result<T> {
    if iters == 0 {
        return Err(MolError::invalid("power_iters must be at least 1"));
    }
    let s = layer.shape(size, size);
    let n = layer.in_ch * size * size;
    let mut v: Vec<T> = match init.take() {
        Some(v) if v.len() == n && v.iter().any(|a| *a != T::zero()) => v,
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
            (0..n)
                .map(|_| T::lit(StandardNormal.sample(&mut rng)))
                .collect()
        }
    };
    let mut u = vec![T::zero(); layer.out_ch * size * size];
    let mut sigma = T::zero();
    for _ in 0..iters {
        let nv = T::lit(l2(&v.iter().map(|a| a.as_f64()).collect::<Vec<_>>()));
        if nv == T::zero() {
            break;
        }
        v.iter_mut().for_each(|a| *a = *a / nv);
        conv::forward(s, &v, &layer.kernel, None, &mut u);
        sigma = u.iter().map(|a| *a * *a).sum::<T>().sqrt();
        conv::backward_input(s, &u, &layer.kernel, &mut v);
    }
    *init = Some(v);
    Ok(sigma)
}

impl<T: Real> DenoiserNet<T> {
    /// Per-layer spectral budget, the D-th root of `1 − m_target`.
    pub fn layer_budget(&self) -> T {
        (T::one() - self.m_target).powf(T::one() / T::of_usize(self.depth()))
    }

    /// Current per-layer norm estimates at the reference size, updating
    /// the persistent power vectors.
    pub fn layer_norms(&mut self, power_iters: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.depth());
        for l in 0..self.depth() {
            let mut pv = self.power_vectors[l].take();
            let sigma = conv_operator_norm(&self.layers[l], SN_REFERENCE_SIZE, power_iters, &mut pv)?;
            self.power_vectors[l] = pv;
            out.push(sigma);
        }
        Ok(out)
    }

    /// In-place form of [`spectral_normalize`].
    ///
    /// Power iteration approaches the top singular value from below, so a
    /// layer is re-estimated from its warm vector after rescaling until the
    /// fresh estimate stays within budget.
    pub fn normalize_spectral(&mut self, power_iters: usize) -> Result<()> {
        if power_iters == 0 {
            return Err(MolError::invalid("power_iters must be at least 1"));
        }
        let budget = self.layer_budget();
        let tol = T::lit(1e-4);
        for l in 0..self.depth() {
            for _ in 0..MAX_ROUNDS {
                let mut pv = self.power_vectors[l].take();
                let sigma = conv_operator_norm(&self.layers[l], SN_REFERENCE_SIZE, power_iters, &mut pv)?;
                self.power_vectors[l] = pv;
                if sigma <= budget + tol {
                    break;
                }
                let s = budget / sigma;
                self.layers[l].kernel.iter_mut().for_each(|w| *w = *w * s);
            }
        }
        Ok(())
    }
}

/// Rescales every convolution whose estimated norm exceeds its budget.
pub fn spectral_normalize<T: Real>(net: &DenoiserNet<T>, power_iters: usize) -> Result<DenoiserNet<T>> {
    let mut out = net.clone();
    out.normalize_spectral(power_iters)?;
    Ok(out)
}
