use std::fs;
use std::path::{Path, PathBuf};

use molkit::denoiser::{
    estimate_local_lipschitz, estimate_monotonicity, load_checkpoint, save_checkpoint, DenoiserNet,
};
use molkit::imaging::io::{load_dataset, save_dataset, save_image};
use molkit::imaging::{psnr_capped, synthesize_set, ComplexImage};
use molkit::linops::adjoint_test;
use molkit::mol::{
    memory_report, reconstruct_modl, reconstruct_mol, reconstruct_sense, train as train_mol, train_modl, MemoryMode,
    ModlReconstructor, MolReconstructor, Reconstructor, SenseReconstructor, TrainSample,
};
use molkit::robustness::{sweep as run_sweep, verify_bound};
use molkit::solvers::{alpha_max, contraction_rate, estimate_rate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, Method};
use crate::CliError;

const SPLITS: [&str; 3] = ["train", "val", "test"];
const METHOD_FILE: &str = "method.json";

/// Seed offsets keep the three splits disjoint for any base seed.
const SPLIT_SEED_STRIDE: u64 = 1_000_000;

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn load_split(dir: &Path) -> Result<Vec<TrainSample<f64>>, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("no dataset at {}", dir.display())));
    }
    let items = load_dataset::<f64>(dir)?;
    Ok(items.iter().map(TrainSample::from_item).collect::<molkit::Result<_>>()?)
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MethodTag {
    method: Method,
}

fn read_method(dir: &Path) -> Method {
    fs::read(dir.join(METHOD_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<MethodTag>(&b).ok())
        .map_or(Method::Mol, |t| t.method)
}

fn load_net(path: &Path) -> Result<DenoiserNet<f64>, CliError> {
    require_dir(path, "checkpoint")?;
    Ok(load_checkpoint::<f64>(path)?)
}

pub fn generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<(), CliError> {
    prepare_out(out, force)?;
    let counts = [cfg.splits.train, cfg.splits.val, cfg.splits.test];
    for (k, (split, count)) in SPLITS.iter().zip(counts).enumerate() {
        let seed = cfg.seeds.data + k as u64 * SPLIT_SEED_STRIDE;
        let items = synthesize_set::<f64>(&cfg.data, count, seed)?;
        save_dataset(&out.join(split), &items)?;
    }
    write_config(out, cfg)?;
    println!("wrote {} / {} / {} samples to {}", counts[0], counts[1], counts[2], out.display());
    Ok(())
}

pub fn initial_net(cfg: &ExperimentConfig) -> molkit::Result<DenoiserNet<f64>> {
    cfg.network.init.build(&cfg.network.architecture, cfg.network.mode, cfg.mol.m, cfg.seeds.init)
}

pub fn train(cfg: &ExperimentConfig, data_root: PathBuf, out: &Path, force: bool) -> Result<(), CliError> {
    let samples = load_split(&data_root.join("train"))?;
    prepare_out(out, force)?;
    let net = initial_net(cfg)?;
    let outcome = match cfg.method {
        Method::Mol => train_mol(&samples, net, &cfg.mol_config()?, &cfg.train)?,
        Method::Modl => train_modl(&samples, net, &cfg.modl_config()?, &cfg.train)?,
        Method::Sense => return Err(CliError::Usage("sense has no trainable parameters".into())),
    };
    let ckpt = out.join("checkpoint");
    save_checkpoint(&ckpt, &outcome.net)?;
    write_json(&ckpt.join(METHOD_FILE), &MethodTag { method: cfg.method })?;
    let mut log = String::new();
    for entry in &outcome.log {
        log.push_str(&serde_json::to_string(entry).expect("log serialises"));
        log.push('\n');
    }
    fs::write(out.join("train_log.jsonl"), log)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "method": cfg.method,
            "mode": cfg.network.mode,
            "epochs": outcome.log.len(),
            "feasible": outcome.feasible,
            "final_max_p": outcome.final_max_p,
            "threshold": cfg.train.lipschitz_t,
            "barrier_resets": outcome.barrier_resets,
        }),
    )?;
    write_config(out, cfg)?;
    if outcome.feasible {
        println!("checkpoint written to {}", ckpt.display());
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "Lipschitz barrier infeasible at the end of training (max P = {:?}, T = {})",
            outcome.final_max_p, cfg.train.lipschitz_t
        )))
    }
}

#[derive(Debug, Serialize)]
struct SampleMetrics {
    id: String,
    psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    residuals: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ledger_size: Option<usize>,
}

pub fn reconstruct(
    cfg: &ExperimentConfig,
    method: Method,
    checkpoint: Option<&Path>,
    input: &Path,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    let samples = load_split(input)?;
    let net = match (method, checkpoint) {
        (Method::Sense, _) => None,
        (_, Some(p)) => Some(load_net(p)?),
        (_, None) => return Err(CliError::Usage(format!("method {} needs --checkpoint", method.as_str()))),
    };
    prepare_out(out, force)?;
    let mol_cfg = cfg.mol_config()?;
    let modl_cfg = cfg.modl_config()?;
    let results: Vec<(ComplexImage<f64>, SampleMetrics)> = samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| -> molkit::Result<_> {
            let id = format!("{k:04}");
            let (x, mut m) = match method {
                Method::Mol => {
                    let r = reconstruct_mol(&s.measurements, net.as_ref().expect("net loaded"), &s.model, &mol_cfg)?;
                    let m = SampleMetrics {
                        id,
                        psnr: 0.0,
                        converged: Some(r.converged),
                        iterations: Some(r.iterations),
                        residuals: Some(r.residuals),
                        ledger_size: None,
                    };
                    (r.x_star, m)
                }
                Method::Modl => {
                    let r = reconstruct_modl(&s.measurements, net.as_ref().expect("net loaded"), &s.model, &modl_cfg, true)?;
                    let size = r.ledger_size();
                    let m = SampleMetrics { id, psnr: 0.0, converged: None, iterations: None, residuals: None, ledger_size: Some(size) };
                    (r.x, m)
                }
                Method::Sense => {
                    let x = reconstruct_sense(&s.measurements, &s.model, cfg.sense.mu, &cfg.sense.solver)?;
                    (x, SampleMetrics { id, psnr: 0.0, converged: None, iterations: None, residuals: None, ledger_size: None })
                }
            };
            m.psnr = psnr_capped(&x, &s.ground_truth)?;
            Ok((x, m))
        })
        .collect::<molkit::Result<_>>()?;
    for (x, m) in &results {
        save_image(&out.join(format!("{}_recon.molk", m.id)), x)?;
    }
    let metrics: Vec<&SampleMetrics> = results.iter().map(|(_, m)| m).collect();
    let all_converged = metrics.iter().all(|m| m.converged != Some(false));
    let mean_psnr = metrics.iter().map(|m| m.psnr).sum::<f64>() / metrics.len() as f64;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "method": method,
            "mean_psnr": mean_psnr,
            "all_converged": all_converged,
            "samples": metrics,
        }),
    )?;
    write_config(out, cfg)?;
    println!("{}: mean PSNR {mean_psnr:.2} dB over {} samples", method.as_str(), metrics.len());
    if all_converged {
        Ok(())
    } else {
        Err(CliError::Failure("some reconstructions did not converge; see metrics.json".into()))
    }
}

fn no_estimate() -> molkit::MolError {
    molkit::MolError::InvalidArgument("monotonicity needs two distinct fixed points".into())
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    pass: bool,
    detail: serde_json::Value,
}

impl Check {
    fn from_result(name: &'static str, r: molkit::Result<(bool, serde_json::Value)>) -> Self {
        match r {
            Ok((pass, detail)) => Check { name, pass, detail },
            Err(e) => Check { name, pass: false, detail: json!({ "error": e.to_string() }) },
        }
    }
}

pub fn verify(cfg: &ExperimentConfig, checkpoint: &Path, data_root: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let net = load_net(checkpoint)?;
    let samples = load_split(&data_root.join("test"))?;
    prepare_out(out, force)?;
    let mol_cfg = cfg.mol_config()?;
    let mut checks = Vec::new();

    checks.push(Check::from_result("adjoint", (|| {
        let worst = samples
            .iter()
            .enumerate()
            .map(|(k, s)| adjoint_test(&s.model, 4, cfg.seeds.attack + k as u64))
            .collect::<molkit::Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok((worst < cfg.verify.adjoint_tolerance, json!({ "max_mismatch": worst, "tolerance": cfg.verify.adjoint_tolerance })))
    })()));

    let solves: Vec<_> = samples
        .par_iter()
        .map(|s| reconstruct_mol(&s.measurements, &net, &s.model, &mol_cfg))
        .collect();
    let solves: Vec<_> = match solves.into_iter().collect::<molkit::Result<Vec<_>>>() {
        Ok(v) => v,
        Err(e) => {
            checks.push(Check { name: "convergence", pass: false, detail: json!({ "error": e.to_string() }) });
            Vec::new()
        }
    };
    if !solves.is_empty() {
        let iterations: Vec<usize> = solves.iter().map(|r| r.iterations).collect();
        let converged = solves.iter().filter(|r| r.converged).count();
        checks.push(Check {
            name: "convergence",
            pass: converged == solves.len(),
            detail: json!({ "converged": converged, "total": solves.len(), "iterations": iterations }),
        });
        let fixed_points: Vec<ComplexImage<f64>> = solves.iter().map(|r| r.x_star.clone()).collect();

        checks.push(Check::from_result("lipschitz", (|| {
            let ps = fixed_points
                .par_iter()
                .map(|x| estimate_local_lipschitz(&net, x, cfg.train.verify_steps, None).map(|e| e.value))
                .collect::<molkit::Result<Vec<f64>>>()?;
            let max_p = ps.iter().cloned().fold(0.0, f64::max);
            let threshold = 1.0 - mol_cfg.m();
            Ok((max_p <= threshold, json!({ "max_p": max_p, "threshold": threshold })))
        })()));

        let m_emp = if fixed_points.len() >= 2 { estimate_monotonicity(&net, &fixed_points).ok() } else { None };
        checks.push(Check::from_result("monotonicity", (|| {
            let m = m_emp.ok_or_else(|| no_estimate())?;
            let pass = m > 0.0 && alpha_max(m).is_ok_and(|a| mol_cfg.alpha() < a);
            Ok((pass, json!({ "m_empirical": m, "alpha": mol_cfg.alpha(), "alpha_max_empirical": alpha_max(m).ok() })))
        })()));

        checks.push(Check::from_result("rate", (|| {
            let m = m_emp.ok_or_else(|| no_estimate())?;
            let bound = contraction_rate(mol_cfg.alpha(), m)?;
            let rates = solves
                .iter()
                .filter(|r| r.converged)
                .map(|r| estimate_rate(&r.residuals))
                .collect::<molkit::Result<Vec<f64>>>()?;
            let worst = rates.iter().cloned().fold(0.0, f64::max);
            let pass = !rates.is_empty() && worst <= bound + cfg.verify.rate_slack;
            Ok((pass, json!({ "max_rate": worst, "bound": bound, "slack": cfg.verify.rate_slack })))
        })()));

        if cfg.verify.robustness {
            checks.push(Check::from_result("robustness", (|| {
                let method = MolReconstructor { name: "mol".into(), net: net.clone(), config: mol_cfg };
                let eps: Vec<f64> = cfg.robustness.epsilons.iter().cloned().filter(|&e| e > 0.0).collect();
                let report = verify_bound(&method, &samples, &eps, cfg.robustness.attack_steps, cfg.seeds.attack)?;
                Ok((report.pass, serde_json::to_value(&report).expect("report serialises")))
            })()));
        }
    }

    checks.push(Check::from_result("memory", (|| {
        let shape = samples[0].model.image_shape().to_vec();
        let n = cfg.modl.n_unrolls;
        let mol = memory_report(MemoryMode::Mol, &net, &shape)?;
        let unrolled = memory_report(MemoryMode::Unrolled { n }, &net, &shape)?;
        let ratio = unrolled.ratio_to(&mol);
        // The analytic model must agree with what a recorded unroll actually keeps.
        let s = &samples[0];
        let recorded = reconstruct_modl(&s.measurements, &net, &s.model, &cfg.modl_config()?, true)?.ledger_size();
        let pass = recorded == unrolled.stored_activations && n * mol.stored_activations == recorded && ratio > 1.0;
        Ok((pass, json!({ "ratio": ratio, "n_unrolls": n, "recorded_ledger": recorded, "mol": mol, "unrolled": unrolled })))
    })()));

    let pass = checks.iter().all(|c| c.pass);
    let report = json!({
        "pass": pass,
        "m": mol_cfg.m(),
        "alpha": mol_cfg.alpha(),
        "lambda": mol_cfg.lambda(),
        "alpha_max": alpha_max(mol_cfg.m())?,
        "checks": checks,
    });
    write_json(&out.join("report.json"), &report)?;
    write_config(out, cfg)?;
    for c in &checks {
        println!("{:<13} {}", c.name, if c.pass { "PASS" } else { "FAIL" });
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Failure("one or more properties failed; see report.json".into()))
    }
}

pub fn sweep(cfg: &ExperimentConfig, specs: &[String], data_root: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let samples = load_split(&data_root.join("test"))?;
    let mut methods: Vec<Box<dyn Reconstructor<f64>>> = Vec::new();
    for spec in specs {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--checkpoint expects NAME=DIR, got {spec:?}")))?;
        let dir = Path::new(dir);
        let net = load_net(dir)?;
        let name = name.to_string();
        methods.push(match read_method(dir) {
            Method::Modl => Box::new(ModlReconstructor { name, net, config: cfg.modl_config()? }),
            _ => Box::new(MolReconstructor { name, net, config: cfg.mol_config()? }),
        });
    }
    if cfg.robustness.include_sense {
        methods.push(Box::new(SenseReconstructor { name: "sense".into(), mu: cfg.sense.mu, solver: cfg.sense.solver }));
    }
    if methods.is_empty() {
        return Err(CliError::Usage("nothing to sweep: pass --checkpoint or enable include_sense".into()));
    }
    prepare_out(out, force)?;
    let refs: Vec<&dyn Reconstructor<f64>> = methods.iter().map(|m| m.as_ref()).collect();
    let table = run_sweep(
        &refs,
        &samples,
        &cfg.robustness.epsilons,
        &cfg.robustness.kinds,
        cfg.robustness.attack_steps,
        cfg.seeds.attack,
    )?;
    fs::write(out.join("sweep.csv"), table.to_csv())?;
    fs::write(out.join("sweep.json"), table.to_json() + "\n")?;
    write_config(out, cfg)?;
    let failed: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.mean_psnr.is_none())
        .map(|r| format!("{}/{}/{}", r.method, r.kind.as_str(), r.epsilon))
        .collect();
    println!("{} sweep rows written to {}", table.rows.len(), out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("failed cells: {}", failed.join(", "))))
    }
}
