//! Deep-equilibrium training with a log-barrier on the local Lipschitz
//! estimate, plus backpropagation-through-unrolling for the MoDL baseline.
//!
//! Per sample the loss is `‖x* − x‖² − β·log(T − P(x*))`. The barrier
//! gradient differentiates `P` at the fixed ascent maximiser `η*`, and its
//! `x*`-component is routed through the implicit adjoint together with the
//! data term.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::baselines::{modl_backward, reconstruct_modl, ModlConfig};
use super::{deq_backward_from, reconstruct_mol_from, BackwardMode, MolConfig};
use crate::denoiser::{estimate_local_lipschitz, lipschitz_gradient, ConstraintMode, DenoiserNet, NetGradient};
use crate::imaging::io::DatasetItem;
use crate::imaging::{psnr_capped, ComplexImage, KSpaceData};
use crate::linops::SenseModel;
use crate::{MolError, Real, Result};

/// Consecutive 0.9 rescalings allowed before training gives up.
const MAX_RESETS_PER_REPAIR: usize = 60;

#[derive(Debug, Clone)]
pub struct TrainSample<T: Real> {
    pub ground_truth: ComplexImage<T>,
    pub measurements: KSpaceData<T>,
    pub model: SenseModel<T>,
}

impl<T: Real> TrainSample<T> {
    pub fn new(ground_truth: ComplexImage<T>, measurements: KSpaceData<T>, model: SenseModel<T>) -> Result<Self> {
        ground_truth.expect_shape(model.image_shape())?;
        if measurements.shape() != model.kspace_shape().as_slice() {
            return Err(MolError::ShapeMismatch {
                expected: model.kspace_shape(),
                actual: measurements.shape().to_vec(),
            });
        }
        Ok(TrainSample {
            ground_truth,
            measurements,
            model,
        })
    }

    pub fn from_item(item: &DatasetItem<T>) -> Result<Self> {
        let model = SenseModel::new(item.maps.clone(), item.mask.clone())?;
        Self::new(item.image.clone(), item.kspace.clone(), model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Log-barrier weight β; zero disables the constraint.
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Barrier threshold `T = 1 − m`.
    pub lipschitz_t: f64,
    /// Lipschitz ascent steps per evaluation during training.
    pub ascent_steps: usize,
    /// Ascent steps of the final feasibility check.
    pub verify_steps: usize,
    /// Power iterations per spectral normalisation (SN mode).
    pub power_iters: usize,
    pub max_backtracks: usize,
    /// Seed of the per-epoch sample shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1e-2,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 4,
            lipschitz_t: 0.9,
            ascent_steps: 10,
            verify_steps: 100,
            power_iters: 10,
            max_backtracks: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(MolError::invalid("beta must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(MolError::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.ascent_steps == 0 || self.verify_steps == 0 || self.power_iters == 0 {
            return Err(MolError::invalid("batch_size, ascent_steps, verify_steps and power_iters must be positive"));
        }
        if !(self.lipschitz_t > 0.0 && self.lipschitz_t < 1.0) {
            return Err(MolError::invalid("lipschitz_t must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub data_loss: f64,
    pub barrier_loss: f64,
    #[serde(rename = "mean_P")]
    pub mean_p: Option<f64>,
    #[serde(rename = "max_P")]
    pub max_p: Option<f64>,
    pub train_psnr: f64,
    pub barrier_resets: usize,
    /// Samples whose adjoint solve fell back to the jacobian-free gradient.
    pub fallbacks: usize,
    /// Forward solves that hit the iteration budget.
    pub unconverged: usize,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub net: DenoiserNet<T>,
    pub log: Vec<EpochLog>,
    /// Largest verification-mode `P(x_i*)` after training (MOL only).
    pub final_max_p: Option<f64>,
    pub feasible: bool,
    pub barrier_resets: usize,
    /// Reconstructions of the training samples by the returned network.
    pub reconstructions: Vec<ComplexImage<T>>,
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// The parameter increment for gradient `g`.
    pub fn step<T: Real>(&mut self, g: &NetGradient<T>) -> NetGradient<T> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let values = g
            .values
            .iter()
            .enumerate()
            .map(|(i, gi)| {
                let gi = gi.as_f64();
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                T::lit(-self.learning_rate * mh / (vh.sqrt() + self.eps))
            })
            .collect();
        NetGradient { values }
    }
}

#[derive(Debug, Clone, Default)]
struct SampleState<T> {
    x: Option<ComplexImage<T>>,
    u: Option<ComplexImage<T>>,
    eta: Option<ComplexImage<T>>,
}

struct Evaluation<T> {
    x: ComplexImage<T>,
    converged: bool,
    iterations: usize,
    p: f64,
}

fn evaluate<T: Real>(
    net: &DenoiserNet<T>,
    s: &TrainSample<T>,
    cfg: &MolConfig<T>,
    state: &mut SampleState<T>,
    ascent_steps: usize,
) -> Result<Evaluation<T>> {
    let x0 = match state.x.take() {
        Some(x) => x,
        None => s.model.adjoint(&s.measurements)?,
    };
    let res = reconstruct_mol_from(&s.measurements, net, &s.model, cfg, x0)?;
    let est = estimate_local_lipschitz(net, &res.x_star, ascent_steps, state.eta.as_ref())?;
    state.eta = Some(est.eta_star);
    state.x = Some(res.x_star.clone());
    Ok(Evaluation {
        x: res.x_star,
        converged: res.converged,
        iterations: res.iterations,
        p: est.value.as_f64(),
    })
}

#[derive(Default)]
struct BatchStats {
    data: f64,
    barrier: f64,
    psnr: f64,
    ps: Vec<f64>,
    fallbacks: usize,
    unconverged: usize,
    iterations: usize,
}

impl BatchStats {
    fn absorb(&mut self, other: BatchStats) {
        self.data += other.data;
        self.barrier += other.barrier;
        self.psnr += other.psnr;
        self.ps.extend(other.ps);
        self.fallbacks += other.fallbacks;
        self.unconverged += other.unconverged;
        self.iterations += other.iterations;
    }
}

struct Ctx<'a, T: Real> {
    data: &'a [TrainSample<T>],
    cfg: &'a MolConfig<T>,
    tcfg: &'a TrainConfig,
    barrier: bool,
}

impl<T: Real> Ctx<'_, T> {
    fn gradient(
        &self,
        net: &DenoiserNet<T>,
        i: usize,
        ev: &Evaluation<T>,
        state: &mut SampleState<T>,
        stats: &mut BatchStats,
    ) -> Result<NetGradient<T>> {
        let s = &self.data[i];
        let err = ev.x.sub(&s.ground_truth);
        stats.data += err.norm_sqr().as_f64();
        stats.psnr += psnr_capped(&ev.x, &s.ground_truth)?;
        stats.ps.push(ev.p);
        stats.iterations += ev.iterations;
        stats.unconverged += usize::from(!ev.converged);
        let mut g = err.scaled(T::lit(2.0));
        let mut theta = NetGradient::zeros(net.param_count());
        if self.barrier {
            let slack = self.tcfg.lipschitz_t - ev.p;
            stats.barrier += -self.tcfg.beta * slack.ln();
            let eta = state.eta.as_ref().expect("evaluation stores eta");
            let lg = lipschitz_gradient(net, &ev.x, eta)?;
            let c = T::lit(self.tcfg.beta / slack);
            g.axpy(c, &lg.grad_x);
            theta.axpy(c, &lg.grad_theta);
        }
        let b = &s.measurements;
        let deq = match deq_backward_from(b, &ev.x, net, &s.model, self.cfg, &g, state.u.as_ref()) {
            Ok(d) => d,
            Err(MolError::AdjointNotConverged { .. }) => {
                stats.fallbacks += 1;
                let mut jf = *self.cfg;
                jf.backward_mode = BackwardMode::JacobianFree;
                state.u = None;
                deq_backward_from(b, &ev.x, net, &s.model, &jf, &g, None)?
            }
            Err(e) => return Err(e),
        };
        if self.cfg.backward_mode == BackwardMode::ImplicitAdjoint && !deq.adjoint_residuals.is_empty() {
            state.u = Some(deq.adjoint);
        }
        theta.axpy(T::one(), &deq.theta);
        Ok(theta)
    }

    /// Restores `P < T` at sample `i` by halving the last update and then,
    /// if needed, shrinking the output layer. Returns the rescale count.
    fn repair(
        &self,
        net: &mut DenoiserNet<T>,
        last_update: &mut Option<NetGradient<T>>,
        i: usize,
        state: &mut SampleState<T>,
    ) -> Result<usize> {
        let t = self.tcfg.lipschitz_t;
        if let Some(mut d) = last_update.take() {
            for _ in 0..self.tcfg.max_backtracks {
                net.apply_update(T::lit(-0.5), &d);
                d.scale(T::lit(0.5));
                if evaluate(net, &self.data[i], self.cfg, state, self.tcfg.ascent_steps)?.p < t {
                    *last_update = Some(d);
                    return Ok(0);
                }
            }
        }
        for resets in 1..=MAX_RESETS_PER_REPAIR {
            net.scale_output(T::lit(0.9));
            if evaluate(net, &self.data[i], self.cfg, state, self.tcfg.ascent_steps)?.p < t {
                return Ok(resets);
            }
        }
        Err(MolError::TheoryInapplicable(format!(
            "barrier infeasible at sample {i} after {MAX_RESETS_PER_REPAIR} resets"
        )))
    }

    /// Rescales until every sample satisfies `P < T` under `steps` ascent
    /// steps. Returns the number of rescales and the final evaluations.
    fn enforce_all(
        &self,
        net: &mut DenoiserNet<T>,
        states: &mut [SampleState<T>],
        steps: usize,
        enforce: bool,
    ) -> Result<(usize, Vec<Evaluation<T>>)> {
        let mut resets = 0;
        loop {
            let evals = (0..self.data.len())
                .map(|i| evaluate(net, &self.data[i], self.cfg, &mut states[i], steps))
                .collect::<Result<Vec<_>>>()?;
            let max_p = evals.iter().map(|e| e.p).fold(0.0, f64::max);
            if !enforce || max_p < self.tcfg.lipschitz_t {
                return Ok((resets, evals));
            }
            if resets == MAX_RESETS_PER_REPAIR {
                return Err(MolError::TheoryInapplicable(format!(
                    "barrier infeasible after {resets} resets (max P = {max_p})"
                )));
            }
            net.scale_output(T::lit(0.9));
            resets += 1;
        }
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Trains `net` as the denoiser of the MOL fixed point.
///
/// In LR mode with `β > 0` the barrier is kept feasible throughout and a
/// final check with `verify_steps` ascent steps is applied to the returned
/// network. In SN mode the barrier is skipped and the layers are
/// re-normalised after every update.
pub fn train<T: Real>(
    dataset: &[TrainSample<T>],
    net: DenoiserNet<T>,
    config: &MolConfig<T>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(MolError::invalid("training set is empty"));
    }
    let mut net = net;
    let sn = net.mode == ConstraintMode::Sn;
    let enforce = !sn && tcfg.beta > 0.0;
    let ctx = Ctx {
        data: dataset,
        cfg: config,
        tcfg,
        barrier: enforce,
    };
    let mut states: Vec<SampleState<T>> = vec![SampleState::default(); dataset.len()];
    if sn {
        net.normalize_spectral(tcfg.power_iters)?;
    }
    let mut total_resets = 0;
    if enforce {
        total_resets += ctx.enforce_all(&mut net, &mut states, tcfg.ascent_steps, true)?.0;
    }
    let mut adam = Adam::new(net.param_count(), tcfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut last_update: Option<NetGradient<T>> = None;
    let mut log = Vec::with_capacity(tcfg.epochs);

    for epoch in 1..=tcfg.epochs {
        let mut epoch_stats = BatchStats::default();
        let mut epoch_resets = 0;
        for batch in shuffled(dataset.len(), &mut rng).chunks(tcfg.batch_size) {
            let (grad, stats) = 'attempt: loop {
                let mut grad = NetGradient::zeros(net.param_count());
                let mut stats = BatchStats::default();
                for &i in batch {
                    let ev = evaluate(&net, &dataset[i], config, &mut states[i], tcfg.ascent_steps)?;
                    if enforce && ev.p >= tcfg.lipschitz_t {
                        epoch_resets += ctx.repair(&mut net, &mut last_update, i, &mut states[i])?;
                        continue 'attempt;
                    }
                    let g = ctx.gradient(&net, i, &ev, &mut states[i], &mut stats)?;
                    grad.axpy(T::one(), &g);
                }
                break (grad, stats);
            };
            let mut grad = grad;
            grad.scale(T::one() / T::of_usize(batch.len()));
            if !grad.is_finite() {
                return Err(MolError::NonFinite("training gradient"));
            }
            let update = adam.step(&grad);
            net.apply_update(T::one(), &update);
            last_update = Some(update);
            if sn {
                net.normalize_spectral(tcfg.power_iters)?;
            }
            epoch_stats.absorb(stats);
        }
        total_resets += epoch_resets;
        let n = dataset.len() as f64;
        log.push(EpochLog {
            epoch,
            data_loss: epoch_stats.data / n,
            barrier_loss: epoch_stats.barrier / n,
            mean_p: Some(epoch_stats.ps.iter().sum::<f64>() / n),
            max_p: Some(epoch_stats.ps.iter().cloned().fold(0.0, f64::max)),
            train_psnr: epoch_stats.psnr / n,
            barrier_resets: epoch_resets,
            fallbacks: epoch_stats.fallbacks,
            unconverged: epoch_stats.unconverged,
            mean_iterations: epoch_stats.iterations as f64 / n,
        });
    }

    let (resets, evals) = ctx.enforce_all(&mut net, &mut states, tcfg.verify_steps, enforce)?;
    total_resets += resets;
    let final_max_p = evals.iter().map(|e| e.p).fold(0.0, f64::max);
    Ok(TrainOutcome {
        net,
        log,
        final_max_p: Some(final_max_p),
        feasible: final_max_p < tcfg.lipschitz_t,
        barrier_resets: total_resets,
        reconstructions: evals.into_iter().map(|e| e.x).collect(),
    })
}

/// Trains `net` by backpropagating through `config.n_unrolls` stored
/// unrolls. Barrier, ascent and verification settings of `tcfg` are ignored.
pub fn train_modl<T: Real>(
    dataset: &[TrainSample<T>],
    net: DenoiserNet<T>,
    config: &ModlConfig<T>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(MolError::invalid("training set is empty"));
    }
    let mut net = net;
    let mut adam = Adam::new(net.param_count(), tcfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let (mut data, mut psnr) = (0.0, 0.0);
        for batch in shuffled(dataset.len(), &mut rng).chunks(tcfg.batch_size) {
            let mut grad = NetGradient::zeros(net.param_count());
            for &i in batch {
                let s = &dataset[i];
                let rec = reconstruct_modl(&s.measurements, &net, &s.model, config, true)?;
                let err = rec.x.sub(&s.ground_truth);
                data += err.norm_sqr().as_f64();
                psnr += psnr_capped(&rec.x, &s.ground_truth)?;
                let (g, _) = modl_backward(&rec, &net, &s.model, config, &err.scaled(T::lit(2.0)))?;
                grad.axpy(T::one(), &g);
            }
            grad.scale(T::one() / T::of_usize(batch.len()));
            if !grad.is_finite() {
                return Err(MolError::NonFinite("training gradient"));
            }
            net.apply_update(T::one(), &adam.step(&grad));
        }
        let n = dataset.len() as f64;
        log.push(EpochLog {
            epoch,
            data_loss: data / n,
            barrier_loss: 0.0,
            mean_p: None,
            max_p: None,
            train_psnr: psnr / n,
            barrier_resets: 0,
            fallbacks: 0,
            unconverged: 0,
            mean_iterations: config.n_unrolls as f64,
        });
    }
    let reconstructions = dataset
        .iter()
        .map(|s| reconstruct_modl(&s.measurements, &net, &s.model, config, false).map(|r| r.x))
        .collect::<Result<_>>()?;
    Ok(TrainOutcome {
        net,
        log,
        final_max_p: None,
        feasible: true,
        barrier_resets: 0,
        reconstructions,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::denoiser::{Activation, Architecture};
    use crate::solvers::SolverConfig;

    fn small_set(n: usize, size: usize) -> Vec<TrainSample<f64>> {
        (0..n as u64)
            .map(|k| {
                let model = undersampled_model(size, 4, 10 + k);
                let (x, b) = phantom_measurements(&model, 10 + k);
                TrainSample::new(x, b, model).unwrap()
            })
            .collect()
    }

    fn small_net(mode: ConstraintMode) -> DenoiserNet<f64> {
        let arch = Architecture { depth: 3, channels: 6, kernel_size: 3, activation: Activation::Softplus };
        DenoiserNet::random(&arch, mode, 0.1, 1).unwrap()
    }

    fn quick_cfg() -> MolConfig<f64> {
        let solver = SolverConfig { fp_tolerance: 1e-4, fp_max_iterations: 400, ..Default::default() };
        MolConfig::new(0.05, 1.0, 0.1, solver, BackwardMode::ImplicitAdjoint).unwrap()
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut adam = Adam::new(3, 0.01);
        let d = adam.step(&NetGradient { values: vec![2.0f64, -0.5, 0.0] });
        assert!((d.values[0] + 0.01).abs() < 1e-9);
        assert!((d.values[1] - 0.01).abs() < 1e-9);
        assert_eq!(d.values[2], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lipschitz_t: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn lr_training_reduces_loss_and_stays_feasible() {
        let data = small_set(4, 16);
        let tcfg = TrainConfig { epochs: 6, learning_rate: 3e-3, batch_size: 2, verify_steps: 30, ..Default::default() };
        let out = train(&data, small_net(ConstraintMode::Lr), &quick_cfg(), &tcfg).unwrap();
        assert_eq!(out.log.len(), 6);
        assert!(out.log.last().unwrap().data_loss < out.log[0].data_loss);
        assert!(out.feasible);
        assert!(out.final_max_p.unwrap() < 0.9);
        let line = serde_json::to_string(&out.log[0]).unwrap();
        for key in ["epoch", "data_loss", "barrier_loss", "mean_P", "max_P", "train_psnr"] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
    }

    #[test]
    fn sn_training_keeps_layer_budgets() {
        let data = small_set(2, 16);
        let tcfg = TrainConfig { epochs: 2, learning_rate: 1e-2, batch_size: 2, verify_steps: 5, ..Default::default() };
        let mut out = train(&data, small_net(ConstraintMode::Sn), &quick_cfg(), &tcfg).unwrap();
        assert!(out.log.iter().all(|l| l.barrier_loss == 0.0));
        let budget = out.net.layer_budget();
        for s in out.net.layer_norms(20).unwrap() {
            assert!(s <= budget + 1e-3);
        }
    }

    #[test]
    fn infeasible_start_is_rescaled() {
        let data = small_set(2, 16);
        let mut net = small_net(ConstraintMode::Lr);
        net.scale_output(40.0);
        let before = estimate_local_lipschitz(&net, &data[0].ground_truth, 10, None).unwrap().value;
        assert!(before > 0.9, "fixture must start infeasible, P = {before}");
        let tcfg = TrainConfig { epochs: 1, batch_size: 2, verify_steps: 20, ..Default::default() };
        let out = train(&data, net, &quick_cfg(), &tcfg).unwrap();
        assert!(out.barrier_resets > 0);
        assert!(out.feasible);
    }

    #[test]
    fn identical_samples_have_vanishing_data_gradient_after_fit() {
        // A single repeated sample: after training its loss stops moving.
        let one = small_set(1, 16).remove(0);
        let data = vec![one.clone(), one.clone(), one];
        let tcfg = TrainConfig { epochs: 8, learning_rate: 3e-3, batch_size: 3, beta: 0.0, verify_steps: 5, ..Default::default() };
        let out = train(&data, small_net(ConstraintMode::Lr), &quick_cfg(), &tcfg).unwrap();
        let first = out.log[0].data_loss;
        let last = out.log.last().unwrap().data_loss;
        assert!(last < first);
        let l = &out.log;
        assert!((l[l.len() - 1].data_loss - l[l.len() - 2].data_loss).abs() < 0.1 * first);
    }

    #[test]
    fn modl_training_improves_over_epochs() {
        let data = small_set(3, 16);
        let cfg = ModlConfig::new(3, 1.0, SolverConfig::default()).unwrap();
        let tcfg = TrainConfig { epochs: 5, learning_rate: 3e-3, batch_size: 3, ..Default::default() };
        let out = train_modl(&data, small_net(ConstraintMode::Lr), &cfg, &tcfg).unwrap();
        assert!(out.log.last().unwrap().data_loss < out.log[0].data_loss);
        assert_eq!(out.reconstructions.len(), 3);
        assert!(out.log[0].mean_p.is_none());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train(&[], small_net(ConstraintMode::Lr), &quick_cfg(), &TrainConfig::default()).is_err());
    }
}
