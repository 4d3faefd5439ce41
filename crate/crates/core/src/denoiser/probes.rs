//! Empirical probes of the local Lipschitz ratio of `H_θ` and of the
//! monotonicity of `F = I − H_θ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DenoiserNet, NetGradient};
use crate::imaging::ComplexImage;
use crate::{MolError, Real, Result};

const ETA_SEED: u64 = 0x1a5c_0de5;

#[derive(Debug, Clone)]
pub struct LipschitzEstimate<T> {
    /// Squared ratio `‖H(x+η*) − H(x)‖² / ‖η*‖²`.
    pub value: T,
    pub eta_star: ComplexImage<T>,
    pub steps_used: usize,
}

/// Gradients of the squared ratio at a fixed perturbation.
#[derive(Debug, Clone)]
pub struct LipschitzGradient<T> {
    pub value: T,
    pub grad_x: ComplexImage<T>,
    pub grad_theta: NetGradient<T>,
}

fn probe_radius<T: Real>(x: &ComplexImage<T>) -> T {
    let n = x.norm();
    if n > T::zero() {
        T::lit(1e-2) * n
    } else {
        T::lit(1e-2)
    }
}

fn ratio<T: Real>(net: &DenoiserNet<T>, x: &ComplexImage<T>, hx: &ComplexImage<T>, eta: &ComplexImage<T>) -> Result<(T, ComplexImage<T>)> {
    let hp = net.forward(&x.add(eta))?;
    let d = hp.sub(hx);
    Ok((d.norm_sqr() / eta.norm_sqr(), d))
}

/// Normalised gradient ascent on `η ↦ ‖H(x+η) − H(x)‖²/‖η‖²` over the
/// sphere `‖η‖ = ρ`, with `ρ = 1e-2·‖x‖` (or `1e-2` when `x = 0`).
///
/// Returns the best perturbation seen, so the value is non-decreasing in
/// `ascent_steps` for a fixed start.
pub fn estimate_local_lipschitz<T: Real>(
    net: &DenoiserNet<T>,
    x: &ComplexImage<T>,
    ascent_steps: usize,
    eta_init: Option<&ComplexImage<T>>,
) -> Result<LipschitzEstimate<T>> {
    if ascent_steps == 0 {
        return Err(MolError::invalid("ascent_steps must be at least 1"));
    }
    if !x.is_finite() {
        return Err(MolError::NonFinite("lipschitz probe input"));
    }
    let rho = probe_radius(x);
    let mut eta = match eta_init {
        Some(e) if e.shape() == x.shape() && e.norm() > T::zero() && e.is_finite() => e.clone(),
        Some(e) if e.shape() != x.shape() => {
            return Err(MolError::ShapeMismatch {
                expected: x.shape().to_vec(),
                actual: e.shape().to_vec(),
            })
        }
        _ => ComplexImage::random(x.shape(), &mut ChaCha8Rng::seed_from_u64(ETA_SEED)),
    };
    eta.scale(rho / eta.norm());
    let hx = net.forward(x)?;
    let mut best: Option<(T, ComplexImage<T>)> = None;
    let mut steps_used = 0;
    for _ in 0..ascent_steps {
        let xp = x.add(&eta);
        let (hp, cache) = net.forward_cached(&xp)?;
        let d = hp.sub(&hx);
        let value = d.norm_sqr() / eta.norm_sqr();
        if best.as_ref().map_or(true, |(b, _)| value > *b) {
            best = Some((value, eta.clone()));
        }
        steps_used += 1;
        let (g, _) = net.backward(&cache, &d, false)?;
        let gn = g.norm();
        if !(gn > T::zero()) || !gn.is_finite() {
            break;
        }
        eta = g.scaled(rho / gn);
    }
    let (_, eta_star) = best.expect("at least one ascent step");
    let (value, _) = ratio(net, x, &hx, &eta_star)?;
    Ok(LipschitzEstimate {
        value,
        eta_star,
        steps_used,
    })
}

/// Value and gradients of `P = ‖H(x+η) − H(x)‖²/‖η‖²` with `η` held fixed.
pub fn lipschitz_gradient<T: Real>(
    net: &DenoiserNet<T>,
    x: &ComplexImage<T>,
    eta: &ComplexImage<T>,
) -> Result<LipschitzGradient<T>> {
    eta.expect_shape(x.shape())?;
    let en = eta.norm_sqr();
    if !(en > T::zero()) {
        return Err(MolError::invalid("perturbation must be nonzero"));
    }
    // The two caches are used one after the other so only one is alive.
    let hx = net.forward(x)?;
    let (hp, cp) = net.forward_cached(&x.add(eta))?;
    let d = hp.sub(&hx);
    let (gxp, gtp) = net.backward(&cp, &d, true)?;
    drop(cp);
    let (_, cx) = net.forward_cached(x)?;
    let (gxx, gtx) = net.backward(&cx, &d, true)?;
    let c = T::lit(2.0) / en;
    let mut grad_x = gxp.sub(&gxx);
    grad_x.scale(c);
    let mut grad_theta = gtp.expect("requested");
    grad_theta.axpy(-T::one(), &gtx.expect("requested"));
    grad_theta.scale(c);
    Ok(LipschitzGradient {
        value: d.norm_sqr() / en,
        grad_x,
        grad_theta,
    })
}

/// Minimum over sample pairs of `Re⟨x−y, F(x)−F(y)⟩/‖x−y‖²` with
/// `F(x) = x − H(x)`.
pub fn estimate_monotonicity<T: Real>(net: &DenoiserNet<T>, samples: &[ComplexImage<T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MolError::invalid("monotonicity needs at least 2 samples"));
    }
    let fs: Vec<ComplexImage<T>> = samples
        .iter()
        .map(|x| net.forward(x).map(|h| x.sub(&h)))
        .collect::<Result<_>>()?;
    let mut best: Option<f64> = None;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            samples[j].expect_shape(samples[i].shape())?;
            let dx = samples[i].sub(&samples[j]);
            let n2 = dx.norm_sqr().as_f64();
            if n2.sqrt() < 1e-12 {
                continue;
            }
            let df = fs[i].sub(&fs[j]);
            let m = dx.re_dot(&df).as_f64() / n2;
            best = Some(best.map_or(m, |b: f64| b.min(m)));
        }
    }
    best.ok_or_else(|| MolError::invalid("all sample pairs are duplicates"))
}
