//! Measurement perturbations, the closed-form amplification bound, and the
//! PSNR-versus-ε sweep.
//!
//! Perturbation size ε is relative to the global norm: `‖δ‖₂ = ε·‖b‖₂`.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::estimate_monotonicity;
use crate::imaging::{psnr_capped, ComplexImage, KSpaceData, SamplingMask};
use crate::mol::{MolReconstructor, Reconstructor, TrainSample};
use crate::solvers::{alpha_max, contraction_rate, rate_expression};
use crate::{MolError, Real, Result};

pub const DEFAULT_ATTACK_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Gaussian,
    Adversarial,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 2] = [PerturbationKind::Gaussian, PerturbationKind::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Gaussian => "gaussian",
            PerturbationKind::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub epsilon: f64,
    pub delta_norm: f64,
    pub output_delta_norm: f64,
    pub psnr_clean: f64,
    pub psnr_perturbed: f64,
    pub kind: PerturbationKind,
}

impl PerturbationReport {
    /// `‖Δ‖/‖δ‖`, zero for a zero perturbation.
    pub fn amplification(&self) -> f64 {
        if self.delta_norm > 0.0 {
            self.output_delta_norm / self.delta_norm
        } else {
            0.0
        }
    }
}

/// `αλ / (1 − √(1 − 2αm + α²(2−m)²))`.
pub fn robustness_bound(alpha: f64, lambda: f64, m: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(MolError::invalid("lambda must be positive"));
    }
    let rate = contraction_rate(alpha, m)?;
    Ok(alpha * lambda / (1.0 - rate))
}

/// The same closed form without the `m < 1` restriction; `None` when the
/// rate expression is not a contraction.
fn amplification_bound(alpha: f64, lambda: f64, m: f64) -> Option<f64> {
    if !(m > 0.0) {
        return None;
    }
    let rate = rate_expression(alpha, m);
    (rate < 1.0).then(|| alpha * lambda / (1.0 - rate))
}

fn supported_noise<T: Real>(b: &KSpaceData<T>, mask: &SamplingMask, rng: &mut ChaCha8Rng) -> Result<KSpaceData<T>> {
    let shape = b.image_shape().to_vec();
    if mask.shape() != shape {
        return Err(MolError::ShapeMismatch {
            expected: shape,
            actual: mask.shape(),
        });
    }
    let mut d = KSpaceData::zeros(b.ncoils(), &shape);
    let per_coil = mask.data().len();
    for c in 0..b.ncoils() {
        for (v, &m) in d.coil_mut(c).iter_mut().zip(mask.data()) {
            if m {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                *v = Complex::new(T::lit(re), T::lit(im));
            }
        }
        debug_assert_eq!(d.coil(c).len(), per_coil);
    }
    Ok(d)
}

fn project<T: Real>(delta: &mut KSpaceData<T>, mask: &SamplingMask, radius: T) {
    for c in 0..delta.ncoils() {
        for (v, &m) in delta.coil_mut(c).iter_mut().zip(mask.data()) {
            if !m {
                *v = Complex::new(T::zero(), T::zero());
            }
        }
    }
    let n = delta.norm();
    if n > T::zero() {
        delta.scale(radius / n);
    }
}

/// White complex Gaussian noise on the sampled locations only, scaled to
/// `‖δ‖₂ = ε·‖b‖₂`. Returns `(b + δ, δ)`.
pub fn gaussian_perturb<T: Real>(
    b: &KSpaceData<T>,
    mask: &SamplingMask,
    epsilon: f64,
    seed: u64,
) -> Result<(KSpaceData<T>, KSpaceData<T>)> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(MolError::invalid("epsilon must be non-negative"));
    }
    let mut delta = supported_noise(b, mask, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if epsilon == 0.0 {
        delta.scale(T::zero());
        return Ok((b.clone(), delta));
    }
    project(&mut delta, mask, T::lit(epsilon) * b.norm());
    let mut out = b.clone();
    out.axpy(T::one(), &delta);
    Ok((out, delta))
}

/// Projected gradient ascent on `‖x(b+δ) − x(b)‖²` over the sphere
/// `‖δ‖ = ε‖b‖` restricted to sampled locations.
///
/// Starts from a seeded random direction, takes steps of `0.1·ε‖b‖` along
/// the normalised gradient, and returns the best perturbation evaluated
/// (the start counts as an evaluation).
#[allow(clippy::too_many_arguments)]
pub fn adversarial_attack<T: Real>(
    sample: &TrainSample<T>,
    method: &dyn Reconstructor<T>,
    clean: &ComplexImage<T>,
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<(KSpaceData<T>, PerturbationReport)> {
    if steps == 0 {
        return Err(MolError::invalid("attack needs at least one step"));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(MolError::invalid("attack epsilon must be positive"));
    }
    let b = &sample.measurements;
    let model = &sample.model;
    let radius = T::lit(epsilon) * b.norm();
    let mut delta = supported_noise(b, model.mask(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    project(&mut delta, model.mask(), radius);
    let step = T::lit(0.1) * radius;
    let cot = |x: &ComplexImage<T>| x.sub(clean).scaled(T::lit(2.0));
    let mut best: Option<(T, KSpaceData<T>, ComplexImage<T>)> = None;
    let mut warm = clean.clone();
    for k in 0..=steps {
        let mut bp = b.clone();
        bp.axpy(T::one(), &delta);
        let (x, grad) = if k < steps {
            let (x, g) = method.reconstruct_with_vjp(&bp, model, &cot, Some(&warm))?;
            (x, Some(g))
        } else {
            (method.reconstruct_from(&bp, model, Some(&warm))?, None)
        };
        let out = x.sub(clean).norm();
        if best.as_ref().map_or(true, |(v, _, _)| out > *v) {
            best = Some((out, delta.clone(), x.clone()));
        }
        warm = x;
        let Some(g) = grad else { break };
        let gn = g.norm();
        if !(gn > T::zero()) {
            break;
        }
        delta.axpy(step / gn, &g);
        project(&mut delta, model.mask(), radius);
    }
    let (out, delta, x) = best.expect("at least one evaluation");
    let report = PerturbationReport {
        epsilon,
        delta_norm: delta.norm().as_f64(),
        output_delta_norm: out.as_f64(),
        psnr_clean: psnr_capped(clean, &sample.ground_truth)?,
        psnr_perturbed: psnr_capped(&x, &sample.ground_truth)?,
        kind: PerturbationKind::Adversarial,
    };
    Ok((delta, report))
}

/// Reconstructs `b + δ` for one sample and perturbation kind.
pub fn perturbation_report<T: Real>(
    sample: &TrainSample<T>,
    method: &dyn Reconstructor<T>,
    clean: &ComplexImage<T>,
    kind: PerturbationKind,
    epsilon: f64,
    attack_steps: usize,
    seed: u64,
) -> Result<PerturbationReport> {
    let psnr_clean = psnr_capped(clean, &sample.ground_truth)?;
    if epsilon == 0.0 {
        return Ok(PerturbationReport {
            epsilon,
            delta_norm: 0.0,
            output_delta_norm: 0.0,
            psnr_clean,
            psnr_perturbed: psnr_clean,
            kind,
        });
    }
    match kind {
        PerturbationKind::Gaussian => {
            let (bp, delta) = gaussian_perturb(&sample.measurements, sample.model.mask(), epsilon, seed)?;
            let x = method.reconstruct_from(&bp, &sample.model, Some(clean))?;
            Ok(PerturbationReport {
                epsilon,
                delta_norm: delta.norm().as_f64(),
                output_delta_norm: x.sub(clean).norm().as_f64(),
                psnr_clean,
                psnr_perturbed: psnr_capped(&x, &sample.ground_truth)?,
                kind,
            })
        }
        PerturbationKind::Adversarial => {
            adversarial_attack(sample, method, clean, epsilon, attack_steps, seed).map(|(_, r)| r)
        }
    }
}

fn cell_seed(seed: u64, sample: usize, eps_index: usize, kind: PerturbationKind) -> u64 {
    seed ^ ((sample as u64) << 32) ^ ((eps_index as u64) << 8) ^ kind as u64
}

/// Outcome of [`verify_bound`], serialised as the bound report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub alpha: f64,
    pub lambda: f64,
    pub m_empirical: f64,
    pub bound: Option<f64>,
    pub max_empirical: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip)]
    pub cells: Vec<PerturbationReport>,
}

/// Largest empirical `‖Δ‖/‖δ‖` over samples, ε values and both kinds,
/// against `robustness_bound(α, λ, m_emp)` with `m_emp` measured by
/// [`estimate_monotonicity`] on the clean reconstructions.
pub fn verify_bound<T: Real>(
    method: &MolReconstructor<T>,
    samples: &[TrainSample<T>],
    epsilons: &[f64],
    attack_steps: usize,
    seed: u64,
) -> Result<BoundReport> {
    if epsilons.is_empty() {
        return Err(MolError::invalid("epsilon list is empty"));
    }
    let clean = samples
        .iter()
        .map(|s| method.reconstruct(&s.measurements, &s.model))
        .collect::<Result<Vec<_>>>()?;
    let m_emp = estimate_monotonicity(&method.net, &clean)?;
    let (alpha, lambda) = (method.config.alpha().as_f64(), method.config.lambda().as_f64());
    let bound = amplification_bound(alpha, lambda, m_emp);
    let Some(bound_value) = bound else {
        let reason = if m_emp <= 0.0 {
            format!("measured monotonicity {m_emp} is not positive")
        } else {
            format!(
                "alpha {alpha} is not below alpha_max({m_emp}) = {:.6}",
                alpha_max(m_emp.min(0.999_999)).unwrap_or(f64::NAN)
            )
        };
        return Ok(BoundReport {
            alpha,
            lambda,
            m_empirical: m_emp,
            bound: None,
            max_empirical: f64::NAN,
            pass: false,
            reason: Some(format!("theory inapplicable: {reason}")),
            cells: Vec::new(),
        });
    };
    let mut cells = Vec::new();
    for (i, (s, x)) in samples.iter().zip(&clean).enumerate() {
        for (e, &eps) in epsilons.iter().enumerate() {
            for kind in PerturbationKind::ALL {
                cells.push(perturbation_report(s, method, x, kind, eps, attack_steps, cell_seed(seed, i, e, kind))?);
            }
        }
    }
    let max_empirical = cells.iter().map(PerturbationReport::amplification).fold(0.0, f64::max);
    Ok(BoundReport {
        alpha,
        lambda,
        m_empirical: m_emp,
        bound: Some(bound_value),
        max_empirical,
        pass: max_empirical <= bound_value,
        reason: None,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub kind: PerturbationKind,
    pub epsilon: f64,
    pub mean_psnr: Option<f64>,
    pub std_psnr: Option<f64>,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn get(&self, method: &str, kind: PerturbationKind, epsilon: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.kind == kind && r.epsilon == epsilon)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,kind,epsilon,mean_psnr,std_psnr,n\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method,
                r.kind.as_str(),
                r.epsilon,
                fmt(r.mean_psnr),
                fmt(r.std_psnr),
                r.n
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("rows serialise")
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and spread of PSNR for every method × kind × ε cell. A cell whose
/// reconstruction fails is reported with `mean_psnr = None` and a reason.
pub fn sweep<T: Real>(
    methods: &[&dyn Reconstructor<T>],
    dataset: &[TrainSample<T>],
    epsilons: &[f64],
    kinds: &[PerturbationKind],
    attack_steps: usize,
    seed: u64,
) -> Result<SweepTable> {
    if epsilons.is_empty() || kinds.is_empty() || dataset.is_empty() {
        return Err(MolError::invalid("sweep needs epsilons, kinds and samples"));
    }
    if epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(MolError::invalid("epsilons must be non-negative"));
    }
    let mut rows = Vec::new();
    for method in methods {
        let clean: Vec<Result<ComplexImage<T>>> = dataset
            .par_iter()
            .map(|s| method.reconstruct(&s.measurements, &s.model))
            .collect();
        let cells: Vec<(PerturbationKind, usize)> = kinds
            .iter()
            .flat_map(|&k| (0..epsilons.len()).map(move |e| (k, e)))
            .collect();
        let results: Vec<SweepRow> = cells
            .par_iter()
            .map(|&(kind, e)| {
                let eps = epsilons[e];
                let psnrs: Result<Vec<f64>> = dataset
                    .iter()
                    .zip(&clean)
                    .enumerate()
                    .map(|(i, (s, x))| {
                        let x = x.as_ref().map_err(|err| MolError::invalid(err.to_string()))?;
                        perturbation_report(s, *method, x, kind, eps, attack_steps, cell_seed(seed, i, e, kind))
                            .map(|r| r.psnr_perturbed)
                    })
                    .collect();
                match psnrs {
                    Ok(p) => {
                        let (mean, std) = mean_std(&p);
                        SweepRow {
                            method: method.name().to_string(),
                            kind,
                            epsilon: eps,
                            mean_psnr: Some(mean),
                            std_psnr: Some(std),
                            n: p.len(),
                            reason: None,
                        }
                    }
                    Err(err) => SweepRow {
                        method: method.name().to_string(),
                        kind,
                        epsilon: eps,
                        mean_psnr: None,
                        std_psnr: None,
                        n: 0,
                        reason: Some(err.to_string()),
                    },
                }
            })
            .collect();
        rows.extend(results);
    }
    Ok(SweepTable { rows })
}
