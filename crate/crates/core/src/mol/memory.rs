//! Analytic activation accounting for one training step.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserNet;
use crate::imaging::check_image_shape;
use crate::{MolError, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MemoryMode {
    /// Deep-equilibrium training: one forward cache at `x*` plus the adjoint state.
    Mol,
    /// Backpropagation through `n` stored unrolls.
    Unrolled { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub mode: MemoryMode,
    /// Network activations kept for the backward pass.
    pub stored_activations: usize,
    /// Extra images held across the backward pass (the adjoint `u` and `Ru`).
    pub adjoint_workspace: usize,
    pub total_values: usize,
    pub bytes: usize,
}

impl MemoryReport {
    pub fn ratio_to(&self, other: &MemoryReport) -> f64 {
        self.total_values as f64 / other.total_values as f64
    }
}

pub fn memory_report<T: Real>(mode: MemoryMode, net: &DenoiserNet<T>, image_shape: &[usize]) -> Result<MemoryReport> {
    check_image_shape(image_shape)?;
    let (h, w) = (image_shape[0], image_shape[1]);
    let frames = image_shape.get(2).copied().unwrap_or(1);
    let per_iter = net.cached_values_per_frame(h, w) * frames;
    let image_values = 2 * h * w * frames;
    let (stored, workspace) = match mode {
        MemoryMode::Mol => (per_iter, 2 * image_values),
        MemoryMode::Unrolled { n } if n >= 1 => (n * per_iter, 0),
        MemoryMode::Unrolled { .. } => return Err(MolError::invalid("unroll count must be at least 1")),
    };
    let total = stored + workspace;
    Ok(MemoryReport {
        mode,
        stored_activations: stored,
        adjoint_workspace: workspace,
        total_values: total,
        bytes: total * std::mem::size_of::<T>(),
    })
}
