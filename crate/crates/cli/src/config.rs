//! The experiment document shared by every command.
//!
//! Every section has defaults, so `{}` is a valid config. Unknown keys are
//! rejected at every level. The resolved document is written next to each
//! command's outputs and can be fed back in to reproduce them.

use std::path::{Path, PathBuf};

use molkit::denoiser::{Architecture, ConstraintMode, DenoiserNet, SmoothingInit};
use molkit::imaging::AcquisitionSpec;
use molkit::mol::{BackwardMode, ModlConfig, MolConfig, TrainConfig};
use molkit::robustness::{PerturbationKind, DEFAULT_ATTACK_STEPS};
use molkit::solvers::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Mol,
    Modl,
    Sense,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mol => "mol",
            Method::Modl => "modl",
            Method::Sense => "sense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Splits { train: 20, val: 4, test: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub attack: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1000, init: 1, attack: 3 }
    }
}

/// Starting weights for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitScheme {
    /// He-initialised hidden layers and a small output layer.
    Random,
    /// A scaled Gaussian blur carried by signed channel pairs plus small noise.
    Smoothing(SmoothingInit),
}

impl InitScheme {
    pub fn build(&self, arch: &Architecture, mode: ConstraintMode, m: f64, seed: u64) -> molkit::Result<DenoiserNet<f64>> {
        match self {
            InitScheme::Random => DenoiserNet::random(arch, mode, m, seed),
            InitScheme::Smoothing(init) => DenoiserNet::smoothing(arch, mode, m, init, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub architecture: Architecture,
    pub mode: ConstraintMode,
    pub init: InitScheme,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            architecture: Architecture::default(),
            mode: ConstraintMode::Lr,
            init: InitScheme::Smoothing(SmoothingInit::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MolSection {
    pub alpha: f64,
    pub lambda: f64,
    pub m: f64,
    pub backward_mode: BackwardMode,
    pub solver: SolverConfig<f64>,
}

impl Default for MolSection {
    fn default() -> Self {
        MolSection {
            alpha: 0.05,
            lambda: 1.0,
            m: 0.1,
            backward_mode: BackwardMode::ImplicitAdjoint,
            solver: SolverConfig { fp_max_iterations: 200, ..SolverConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModlSection {
    pub n_unrolls: usize,
    pub lambda: f64,
    pub solver: SolverConfig<f64>,
}

impl Default for ModlSection {
    fn default() -> Self {
        ModlSection { n_unrolls: 10, lambda: 1.0, solver: SolverConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenseSection {
    pub mu: f64,
    pub solver: SolverConfig<f64>,
}

impl Default for SenseSection {
    fn default() -> Self {
        SenseSection { mu: 0.03, solver: SolverConfig { cg_max_iterations: 1000, ..SolverConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    pub epsilons: Vec<f64>,
    pub kinds: Vec<PerturbationKind>,
    pub attack_steps: usize,
    /// Adds the SENSE baseline to every sweep.
    pub include_sense: bool,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        RobustnessSection {
            epsilons: vec![0.0, 0.05, 0.1, 0.2],
            kinds: vec![PerturbationKind::Gaussian, PerturbationKind::Adversarial],
            attack_steps: DEFAULT_ATTACK_STEPS,
            include_sense: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Runs the attack-based bound check, which dominates the runtime.
    pub robustness: bool,
    pub rate_slack: f64,
    pub adjoint_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { robustness: true, rate_slack: 0.02, adjoint_tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Dataset root holding `train/`, `val/` and `test/`. Defaults to
    /// `<output_dir>/data`.
    pub dataset_dir: Option<PathBuf>,
    pub method: Method,
    pub data: AcquisitionSpec,
    pub splits: Splits,
    pub seeds: Seeds,
    pub network: NetworkSection,
    pub mol: MolSection,
    pub modl: ModlSection,
    pub sense: SenseSection,
    pub train: TrainConfig,
    pub robustness: RobustnessSection,
    pub verify: VerifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            dataset_dir: None,
            method: Method::Mol,
            data: AcquisitionSpec::default(),
            splits: Splits::default(),
            seeds: Seeds::default(),
            network: NetworkSection::default(),
            mol: MolSection::default(),
            modl: ModlSection::default(),
            sense: SenseSection::default(),
            train: TrainConfig::default(),
            robustness: RobustnessSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces every seed, including `train.seed`, with `seed`. The split
    /// and role offsets applied downstream keep the streams distinct.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = Seeds { data: seed, init: seed, attack: seed };
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: molkit::MolError| CliError::Usage(format!("invalid config: {e}"));
        self.mol_config().map_err(usage)?;
        self.modl_config().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.mol.solver.validate().map_err(usage)?;
        self.modl.solver.validate().map_err(usage)?;
        self.sense.solver.validate().map_err(usage)?;
        if !(self.sense.mu > 0.0) {
            return Err(CliError::Usage("invalid config: sense.mu must be positive".into()));
        }
        if self.splits.train == 0 || self.splits.test == 0 {
            return Err(CliError::Usage("invalid config: train and test splits must be non-empty".into()));
        }
        if self.robustness.epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(CliError::Usage("invalid config: epsilons must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn mol_config(&self) -> molkit::Result<MolConfig<f64>> {
        MolConfig::new(self.mol.alpha, self.mol.lambda, self.mol.m, self.mol.solver, self.mol.backward_mode)
    }

    pub fn modl_config(&self) -> molkit::Result<ModlConfig<f64>> {
        ModlConfig::new(self.modl.n_unrolls, self.modl.lambda, self.modl.solver)
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
