//! The learned operator `H_θ`: a small fully convolutional network acting on
//! complex images through a two-channel (real, imaginary) stacking.
//!
//! Reverse mode is written by hand. [`DenoiserNet::forward_cached`] records
//! exactly the activations the backward pass needs, which is also what the
//! memory accounting in [`crate::mol::memory_report`] counts.

pub mod checkpoint;
mod conv;
mod probes;
mod spectral;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::ComplexImage;
use crate::{MolError, Real, Result};

use conv::ConvShape;
pub use probes::{
    estimate_local_lipschitz, estimate_monotonicity, lipschitz_gradient, LipschitzEstimate,
    LipschitzGradient,
};
pub use checkpoint::{load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest};
pub use spectral::{conv_operator_norm, spectral_normalize, SN_REFERENCE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "softplus")]
    Softplus,
    #[serde(rename = "none")]
    Identity,
}

/// How the Lipschitz constant of `H_θ` is controlled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintMode {
    /// Layer-wise spectral normalisation.
    #[serde(rename = "SN")]
    Sn,
    /// Local Lipschitz estimate enforced through a training barrier.
    #[serde(rename = "LR")]
    Lr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub depth: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub activation: Activation,
}

/// Parameters of [`DenoiserNet::smoothing`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingInit {
    pub gain: f64,
    /// Gaussian width in pixels.
    pub sigma: f64,
    pub noise: f64,
}

impl Default for SmoothingInit {
    fn default() -> Self {
        SmoothingInit {
            gain: 0.9,
            sigma: 0.5,
            noise: 0.05,
        }
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            depth: 5,
            channels: 32,
            kernel_size: 3,
            activation: Activation::Softplus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    /// `(out_ch, in_ch, k, k)` row-major.
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize, activation: Activation) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            ksize,
            kernel: vec![T::zero(); out_ch * in_ch * ksize * ksize],
            bias: vec![T::zero(); out_ch],
            activation,
        }
    }

    fn shape(&self, h: usize, w: usize) -> ConvShape {
        ConvShape {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            k: self.ksize,
            h,
            w,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[inline]
fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Flat parameter-shaped vector (per layer: kernel then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient<T> {
    pub values: Vec<T>,
}

impl<T: Real> NetGradient<T> {
    pub fn zeros(n: usize) -> Self {
        NetGradient {
            values: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn axpy(&mut self, a: T, other: &Self) {
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v = *v + a * *o;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).map(|(a, b)| *a * *b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Activations recorded by [`DenoiserNet::forward_cached`] for one frame.
#[derive(Debug, Clone)]
struct FrameCache<T> {
    /// Input of every layer, starting with the two-channel image.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of every layer that has a nonlinearity.
    pre: Vec<Option<Vec<T>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    shape: Vec<usize>,
    frames: Vec<FrameCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Number of scalars held by the cache.
    pub fn stored_values(&self) -> usize {
        self.frames
            .iter()
            .map(|f| {
                f.inputs.iter().map(Vec::len).sum::<usize>()
                    + f.pre.iter().flatten().map(Vec::len).sum::<usize>()
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserNet<T> {
    layers: Vec<ConvLayer<T>>,
    pub mode: ConstraintMode,
    pub m_target: T,
    /// Warm-start vectors for spectral-norm power iteration, one per layer.
    power_vectors: Vec<Option<Vec<T>>>,
}

impl<T: Real> PartialEq for DenoiserNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.mode == other.mode && self.m_target == other.m_target
    }
}

fn pack<T: Real>(frame: &[Complex<T>]) -> Vec<T> {
    let hw = frame.len();
    let mut out = vec![T::zero(); 2 * hw];
    for (p, z) in frame.iter().enumerate() {
        out[p] = z.re;
        out[hw + p] = z.im;
    }
    out
}

fn unpack<T: Real>(planes: &[T]) -> Vec<Complex<T>> {
    let hw = planes.len() / 2;
    (0..hw).map(|p| Complex::new(planes[p], planes[hw + p])).collect()
}

impl<T: Real> DenoiserNet<T> {
    pub fn new(layers: Vec<ConvLayer<T>>, mode: ConstraintMode, m_target: T) -> Result<Self> {
        if layers.is_empty() {
            return Err(MolError::invalid("network needs at least one layer"));
        }
        if !(m_target > T::zero() && m_target < T::one()) {
            return Err(MolError::invalid("m_target must lie in (0, 1)"));
        }
        let mut ch = 2;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_ch != ch {
                return Err(MolError::invalid(format!(
                    "layer {l} expects {} input channels, previous layer gives {ch}",
                    layer.in_ch
                )));
            }
            if layer.ksize % 2 == 0 {
                return Err(MolError::invalid(format!("layer {l} kernel size must be odd")));
            }
            if layer.kernel.len() != layer.out_ch * layer.in_ch * layer.ksize * layer.ksize
                || layer.bias.len() != layer.out_ch
            {
                return Err(MolError::invalid(format!("layer {l} parameter sizes are inconsistent")));
            }
            if layer.kernel.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(MolError::NonFinite("layer parameters"));
            }
            ch = layer.out_ch;
        }
        if ch != 2 {
            return Err(MolError::invalid("last layer must produce 2 channels"));
        }
        let n = layers.len();
        Ok(DenoiserNet {
            layers,
            mode,
            m_target,
            power_vectors: vec![None; n],
        })
    }

    /// Random initialisation: He-style hidden layers, a small last layer so
    /// the initial network is a mild perturbation of a constant map.
    pub fn random(arch: &Architecture, mode: ConstraintMode, m_target: T, seed: u64) -> Result<Self> {
        if arch.depth == 0 || arch.channels == 0 {
            return Err(MolError::invalid("architecture needs positive depth and channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.depth);
        for l in 0..arch.depth {
            let in_ch = if l == 0 { 2 } else { arch.channels };
            let last = l + 1 == arch.depth;
            let out_ch = if last { 2 } else { arch.channels };
            let act = if last { Activation::Identity } else { arch.activation };
            let mut layer = ConvLayer::zeros(in_ch, out_ch, arch.kernel_size, act);
            let fan_in = (in_ch * arch.kernel_size * arch.kernel_size) as f64;
            let gain = if last { 0.1 } else { 1.0 };
            let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid normal");
            for v in &mut layer.kernel {
                *v = T::lit(normal.sample(&mut rng));
            }
            layers.push(layer);
        }
        DenoiserNet::new(layers, mode, m_target)
    }

    /// Starts `H` close to `gain·(g ⋆ x)`, with `g` a normalised Gaussian of
    /// width `sigma` pixels. Four hidden channels carry `±Re x` and `±Im x`
    /// through the softplus layers exactly, because
    /// `softplus(u) − softplus(−u) = u`. The remaining weights are random,
    /// scaled by `noise` relative to the He initialisation.
    pub fn smoothing(arch: &Architecture, mode: ConstraintMode, m_target: T, init: &SmoothingInit, seed: u64) -> Result<Self> {
        if arch.depth < 2 || arch.channels < 4 {
            return Err(MolError::invalid("smoothing init needs depth ≥ 2 and at least 4 channels"));
        }
        if arch.activation != Activation::Softplus {
            return Err(MolError::invalid("smoothing init relies on softplus activations"));
        }
        if !(init.sigma > 0.0 && init.noise >= 0.0 && init.gain.is_finite()) {
            return Err(MolError::invalid("smoothing init needs sigma > 0, noise ≥ 0 and a finite gain"));
        }
        let mut net = Self::random(arch, mode, m_target, seed)?;
        let k = arch.kernel_size;
        let c = k as f64 / 2.0 - 0.5;
        let mut taps: Vec<f64> = (0..k * k)
            .map(|t| {
                let (dy, dx) = ((t / k) as f64 - c, (t % k) as f64 - c);
                (-(dy * dy + dx * dx) / (2.0 * init.sigma * init.sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|v| *v /= total);
        let centre = k * k / 2;
        let depth = arch.depth;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            layer.kernel.iter_mut().for_each(|v| *v = *v * T::lit(init.noise));
            let in_ch = layer.in_ch;
            let mut set = |o: usize, i: usize, t: usize, v: f64| layer.kernel[(o * in_ch + i) * k * k + t] = T::lit(v);
            for t in 0..k * k {
                if l == 0 {
                    // (Re, Im) → (Re, −Re, Im, −Im), smoothed.
                    set(0, 0, t, taps[t]);
                    set(1, 0, t, -taps[t]);
                    set(2, 1, t, taps[t]);
                    set(3, 1, t, -taps[t]);
                    continue;
                }
                // Hidden pairs hold (softplus(u), softplus(−u)); their difference is u.
                let d = if t == centre { 1.0 } else { 0.0 };
                if l + 1 == depth {
                    let g = init.gain * d;
                    set(0, 0, t, g);
                    set(0, 1, t, -g);
                    set(1, 2, t, g);
                    set(1, 3, t, -g);
                } else {
                    for (o, sign) in [(0, 1.0), (1, -1.0)] {
                        set(o, 0, t, sign * d);
                        set(o, 1, t, -sign * d);
                        set(o + 2, 2, t, sign * d);
                        set(o + 2, 3, t, -sign * d);
                    }
                }
            }
        }
        Ok(net)
    }

    /// A network whose every weight is zero, so `H ≡ 0`.
    pub fn zeros(arch: &Architecture, mode: ConstraintMode, m_target: T) -> Result<Self> {
        let mut net = Self::random(arch, mode, m_target, 0)?;
        for layer in &mut net.layers {
            layer.kernel.iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(net)
    }

    /// `H(x) = s·x` as a single linear 1×1 layer.
    pub fn scalar(s: T, mode: ConstraintMode, m_target: T) -> Result<Self> {
        let mut layer = ConvLayer::zeros(2, 2, 1, Activation::Identity);
        layer.kernel[0] = s;
        layer.kernel[3] = s;
        DenoiserNet::new(vec![layer], mode, m_target)
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Widest hidden channel count.
    pub fn channels(&self) -> usize {
        self.layers.iter().map(|l| l.out_ch).max().unwrap_or(2)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.kernel);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(MolError::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let nk = layer.kernel.len();
            layer.kernel.copy_from_slice(&values[off..off + nk]);
            off += nk;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Adds `step·direction` to the parameters.
    pub fn apply_update(&mut self, step: T, direction: &NetGradient<T>) {
        let mut off = 0;
        for layer in &mut self.layers {
            for v in layer.kernel.iter_mut().chain(layer.bias.iter_mut()) {
                *v = *v + step * direction.values[off];
                off += 1;
            }
        }
    }

    /// Scales the last layer's kernel, which scales every difference
    /// `H(x) − H(y)` by exactly `s`.
    pub fn scale_output(&mut self, s: T) {
        if let Some(last) = self.layers.last_mut() {
            last.kernel.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    fn check_input(&self, x: &ComplexImage<T>) -> Result<()> {
        crate::imaging::check_image_shape(x.shape())?;
        if !x.is_finite() {
            return Err(MolError::NonFinite("denoiser input"));
        }
        Ok(())
    }

    /// Number of cached scalars per frame for an `h×w` input.
    pub fn cached_values_per_frame(&self, h: usize, w: usize) -> usize {
        let hw = h * w;
        self.layers
            .iter()
            .map(|l| {
                l.in_ch * hw
                    + match l.activation {
                        Activation::Softplus => l.out_ch * hw,
                        Activation::Identity => 0,
                    }
            })
            .sum()
    }

    fn frame_forward(&self, h: usize, w: usize, frame: &[Complex<T>]) -> Vec<T> {
        let mut cur = pack(frame);
        let mut next = Vec::new();
        for layer in &self.layers {
            next.resize(layer.out_ch * h * w, T::zero());
            conv::forward(layer.shape(h, w), &cur, &layer.kernel, Some(&layer.bias), &mut next);
            if layer.activation == Activation::Softplus {
                next.iter_mut().for_each(|v| *v = softplus(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// `H_θ(x)`, keeping only two activation buffers alive.
    pub fn forward(&self, x: &ComplexImage<T>) -> Result<ComplexImage<T>> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let mut out = ComplexImage::zeros(x.shape());
        let mut frame = vec![Complex::new(T::zero(), T::zero()); h * w];
        for t in 0..x.frames() {
            x.gather_frame(t, &mut frame);
            let planes = self.frame_forward(h, w, &frame);
            out.scatter_frame(t, &unpack(&planes));
        }
        Ok(out)
    }

    /// `H_θ(x)` plus the activations required by [`Self::backward`].
    pub fn forward_cached(&self, x: &ComplexImage<T>) -> Result<(ComplexImage<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let mut out = ComplexImage::zeros(x.shape());
        let mut frame = vec![Complex::new(T::zero(), T::zero()); h * w];
        let mut frames = Vec::with_capacity(x.frames());
        for t in 0..x.frames() {
            x.gather_frame(t, &mut frame);
            let mut inputs = Vec::with_capacity(self.layers.len());
            let mut pre = Vec::with_capacity(self.layers.len());
            let mut cur = pack(&frame);
            for layer in &self.layers {
                let mut z = vec![T::zero(); layer.out_ch * h * w];
                conv::forward(layer.shape(h, w), &cur, &layer.kernel, Some(&layer.bias), &mut z);
                inputs.push(cur);
                match layer.activation {
                    Activation::Softplus => {
                        cur = z.iter().map(|&v| softplus(v)).collect();
                        pre.push(Some(z));
                    }
                    Activation::Identity => {
                        cur = z;
                        pre.push(None);
                    }
                }
            }
            out.scatter_frame(t, &unpack(&cur));
            frames.push(FrameCache { inputs, pre });
        }
        Ok((
            out,
            ForwardCache {
                shape: x.shape().to_vec(),
                frames,
            },
        ))
    }

    /// Reverse pass: `Jᵀv` for the cached input and, when requested, the
    /// parameter gradient of `Re⟨v, H_θ(x)⟩`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        v: &ComplexImage<T>,
        want_params: bool,
    ) -> Result<(ComplexImage<T>, Option<NetGradient<T>>)> {
        v.expect_shape(&cache.shape)?;
        let (h, w) = (cache.shape[0], cache.shape[1]);
        let hw = h * w;
        let mut grad_x = ComplexImage::zeros(&cache.shape);
        let mut grad = want_params.then(|| NetGradient::zeros(self.param_count()));
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |off, l| {
                let start = *off;
                *off += l.param_count();
                Some(start)
            })
            .collect();
        let mut frame = vec![Complex::new(T::zero(), T::zero()); hw];
        for (t, fc) in cache.frames.iter().enumerate() {
            v.gather_frame(t, &mut frame);
            let mut g = pack(&frame);
            for (l, layer) in self.layers.iter().enumerate().rev() {
                if let Some(z) = &fc.pre[l] {
                    for (gv, &zv) in g.iter_mut().zip(z) {
                        *gv = *gv * sigmoid(zv);
                    }
                }
                let s = layer.shape(h, w);
                if let Some(grad) = grad.as_mut() {
                    let nk = layer.kernel.len();
                    let (gk, gb) = grad.values[offsets[l]..offsets[l] + nk + layer.bias.len()].split_at_mut(nk);
                    conv::backward_params(s, &fc.inputs[l], &g, gk, gb);
                }
                let mut gin = vec![T::zero(); layer.in_ch * hw];
                conv::backward_input(s, &g, &layer.kernel, &mut gin);
                g = gin;
            }
            grad_x.scatter_frame(t, &unpack(&g));
        }
        Ok((grad_x, grad))
    }

    /// Gradients of `Re⟨v, H_θ(x)⟩` with respect to `x` and `θ`.
    pub fn vjp(&self, x: &ComplexImage<T>, v: &ComplexImage<T>) -> Result<(ComplexImage<T>, NetGradient<T>)> {
        v.expect_shape(x.shape())?;
        let (_, cache) = self.forward_cached(x)?;
        let (gx, gt) = self.backward(&cache, v, true)?;
        Ok((gx, gt.expect("parameter gradient requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(seed: u64, act: Activation) -> DenoiserNet<f64> {
        let arch = Architecture {
            depth: 3,
            channels: 4,
            kernel_size: 3,
            activation: act,
        };
        let mut net = DenoiserNet::random(&arch, ConstraintMode::Lr, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for layer in net.layers_mut() {
            for b in &mut layer.bias {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        net.scale_output(5.0);
        net
    }

    fn random_image(shape: &[usize], seed: u64) -> ComplexImage<f64> {
        ComplexImage::random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent nested-loop implementation of the whole network.
    fn oracle_forward(net: &DenoiserNet<f64>, x: &ComplexImage<f64>) -> ComplexImage<f64> {
        let (h, w) = (x.height(), x.width());
        let mut a: Vec<Vec<Vec<f64>>> = vec![
            (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| x.data()[i * w + j].re).collect::<Vec<_>>(),
            (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| x.data()[i * w + j].im).collect::<Vec<_>>(),
        ]
        .into_iter()
        .map(|plane| plane.chunks(w).map(|r| r.to_vec()).collect())
        .collect();
        for layer in net.layers() {
            let k = layer.ksize as isize;
            let p = k / 2;
            let mut next = vec![vec![vec![0.0; w]; h]; layer.out_ch];
            for o in 0..layer.out_ch {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = layer.bias[o];
                        for i in 0..layer.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - p, xx + kx - p);
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        let wv = layer.kernel[((o * layer.in_ch + i) * layer.ksize
                                            + ky as usize)
                                            * layer.ksize
                                            + kx as usize];
                                        acc += wv * a[i][sy as usize][sx as usize];
                                    }
                                }
                            }
                        }
                        next[o][y as usize][xx as usize] = match layer.activation {
                            Activation::Softplus => (1.0 + acc.exp()).ln(),
                            Activation::Identity => acc,
                        };
                    }
                }
            }
            a = next;
        }
        ComplexImage::from_fn(h, w, |i, j| Complex::new(a[0][i][j], a[1][i][j]))
    }

    #[test]
    fn noiseless_smoothing_init_is_a_scaled_gaussian_blur() {
        let arch = Architecture { depth: 4, channels: 6, kernel_size: 3, activation: Activation::Softplus };
        let init = SmoothingInit { gain: 0.8, sigma: 0.7, noise: 0.0 };
        let net = DenoiserNet::<f64>::smoothing(&arch, ConstraintMode::Lr, 0.1, &init, 3).unwrap();
        let x = random_image(&[7, 6], 11);
        let y = net.forward(&x).unwrap();
        let g = |d: f64| (-d / (2.0 * 0.49)).exp();
        let norm: f64 = (-1i32..=1).flat_map(|a| (-1i32..=1).map(move |b| g((a * a + b * b) as f64))).sum();
        for i in 0..7i32 {
            for j in 0..6i32 {
                let mut acc = Complex::new(0.0, 0.0);
                for a in -1..=1 {
                    for b in -1..=1 {
                        let (ii, jj) = (i + a, j + b);
                        if (0..7).contains(&ii) && (0..6).contains(&jj) {
                            acc += x.data()[(ii * 6 + jj) as usize] * g((a * a + b * b) as f64);
                        }
                    }
                }
                let expect = acc * (0.8 / norm);
                assert!((y.data()[(i * 6 + j) as usize] - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_init_rejects_unsupported_shapes() {
        let init = SmoothingInit::default();
        let narrow = Architecture { channels: 3, ..Architecture::default() };
        assert!(DenoiserNet::<f64>::smoothing(&narrow, ConstraintMode::Lr, 0.1, &init, 0).is_err());
        let shallow = Architecture { depth: 1, ..Architecture::default() };
        assert!(DenoiserNet::<f64>::smoothing(&shallow, ConstraintMode::Lr, 0.1, &init, 0).is_err());
        let linear = Architecture { activation: Activation::Identity, ..Architecture::default() };
        assert!(DenoiserNet::<f64>::smoothing(&linear, ConstraintMode::Lr, 0.1, &init, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = DenoiserNet::<f64>::zeros(&Architecture::default(), ConstraintMode::Lr, 0.1).unwrap();
        let y = net.forward(&random_image(&[8, 8], 1)).unwrap();
        assert_eq!(y.norm(), 0.0);
    }

    #[test]
    fn scalar_network_scales() {
        let net = DenoiserNet::<f64>::scalar(0.9, ConstraintMode::Lr, 0.1).unwrap();
        let x = random_image(&[8, 8], 2);
        assert!(net.forward(&x).unwrap().sub(&x.scaled(0.9)).norm() < 1e-14);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let net = tiny(3, Activation::Softplus);
        let x = random_image(&[8, 8], 3);
        let y = net.forward(&x).unwrap();
        assert!(y.sub(&oracle_forward(&net, &x)).norm() < 1e-10);
        let (yc, _) = net.forward_cached(&x).unwrap();
        assert_eq!(y, yc);
    }

    #[test]
    fn linear_network_has_constant_jacobian() {
        let net = tiny(4, Activation::Identity);
        let v = random_image(&[6, 6], 5);
        let (g1, _) = net.vjp(&random_image(&[6, 6], 6), &v).unwrap();
        let (g2, _) = net.vjp(&random_image(&[6, 6], 7), &v).unwrap();
        assert!(g1.sub(&g2).norm() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let net = tiny(8, Activation::Softplus);
        for trial in 0..10 {
            let x = random_image(&[6, 6], 20 + trial);
            let v = random_image(&[6, 6], 40 + trial);
            let (gx, gt) = net.vjp(&x, &v).unwrap();
            let f = |xx: &ComplexImage<f64>, n: &DenoiserNet<f64>| n.forward(xx).unwrap().re_dot(&v);
            let dir = random_image(&[6, 6], 60 + trial);
            let eps = 1e-5;
            let mut xp = x.clone();
            xp.axpy(eps, &dir);
            let mut xm = x.clone();
            xm.axpy(-eps, &dir);
            let fd = (f(&xp, &net) - f(&xm, &net)) / (2.0 * eps);
            let an = gx.re_dot(&dir);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "x: {fd} vs {an}");

            let mut rng = ChaCha8Rng::seed_from_u64(80 + trial);
            let pdir: Vec<f64> = (0..net.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = net.params();
            let shifted = |s: f64| {
                let mut n = net.clone();
                let p: Vec<f64> = base.iter().zip(&pdir).map(|(a, d)| a + s * d).collect();
                n.set_params(&p).unwrap();
                n
            };
            let fdp = (f(&x, &shifted(eps)) - f(&x, &shifted(-eps))) / (2.0 * eps);
            let anp = gt.dot(&NetGradient { values: pdir });
            assert!((fdp - anp).abs() <= 1e-6 * anp.abs().max(1.0), "θ: {fdp} vs {anp}");
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = tiny(9, Activation::Softplus);
        let x = random_image(&[6, 6], 1);
        let (gx, gt) = net.vjp(&x, &ComplexImage::zeros(&[6, 6])).unwrap();
        assert_eq!(gx.norm(), 0.0);
        assert_eq!(gt.norm(), 0.0);
    }

    #[test]
    fn vjp_rejects_shape_mismatch() {
        let net = tiny(9, Activation::Softplus);
        assert!(net.vjp(&random_image(&[6, 6], 1), &random_image(&[6, 5], 2)).is_err());
    }

    #[test]
    fn channel_chain_is_validated() {
        let bad = vec![ConvLayer::<f64>::zeros(3, 2, 3, Activation::Identity)];
        assert!(DenoiserNet::new(bad, ConstraintMode::Lr, 0.1).is_err());
        let even = vec![ConvLayer::<f64>::zeros(2, 2, 2, Activation::Identity)];
        assert!(DenoiserNet::new(even, ConstraintMode::Lr, 0.1).is_err());
    }

    #[test]
    fn translation_equivariant_in_the_interior() {
        let net = tiny(10, Activation::Softplus);
        let (h, w) = (20usize, 20usize);
        let x = random_image(&[h, w], 11);
        let (sy, sx) = (2usize, 3usize);
        let shifted = ComplexImage::from_fn(h, w, |i, j| {
            x.data()[((i + h - sy) % h) * w + (j + w - sx) % w]
        });
        let a = net.forward(&shifted).unwrap();
        let b = net.forward(&x).unwrap();
        let crop = 2 * net.depth();
        for i in crop + sy..h - crop {
            for j in crop + sx..w - crop {
                let d = a.data()[i * w + j] - b.data()[(i - sy) * w + (j - sx)];
                assert!(d.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn dynamic_input_is_frame_wise() {
        let net = tiny(12, Activation::Softplus);
        let x = random_image(&[8, 8, 3], 13);
        let y = net.forward(&x).unwrap();
        for t in 0..3 {
            let yt = net.forward(&x.frame(t)).unwrap();
            assert!(y.frame(t).sub(&yt).norm() < 1e-14);
        }
    }

    #[test]
    fn cache_size_matches_accounting() {
        let net = DenoiserNet::<f64>::random(&Architecture::default(), ConstraintMode::Lr, 0.1, 1).unwrap();
        let (_, cache) = net.forward_cached(&random_image(&[8, 8], 1)).unwrap();
        assert_eq!(cache.stored_values(), net.cached_values_per_frame(8, 8));
    }

    #[test]
    fn single_precision_forward() {
        let net64 = tiny(14, Activation::Softplus);
        let layers: Vec<ConvLayer<f32>> = net64
            .layers()
            .iter()
            .map(|l| ConvLayer {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                ksize: l.ksize,
                kernel: l.kernel.iter().map(|&v| v as f32).collect(),
                bias: l.bias.iter().map(|&v| v as f32).collect(),
                activation: l.activation,
            })
            .collect();
        let net32 = DenoiserNet::new(layers, ConstraintMode::Lr, 0.1f32).unwrap();
        let x = random_image(&[8, 8], 15);
        let y64 = net64.forward(&x).unwrap();
        let y32 = net32.forward(&x.cast::<f32>()).unwrap().cast::<f64>();
        assert!(y64.sub(&y32).norm() / y64.norm() < 1e-5);
    }
}
