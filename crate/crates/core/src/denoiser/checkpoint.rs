//! Weight checkpoints: a directory holding `manifest.json` and one
//! `layer_XX.molk` container per convolution.
//!
//! Each layer record has role `weights` and shape `[out_ch, in_ch·k·k + 1]`;
//! row `o` holds the kernel taps of output channel `o` followed by its bias,
//! stored in the real part.

use std::fs;
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::{Activation, ConstraintMode, ConvLayer, DenoiserNet, SN_REFERENCE_SIZE};
use crate::imaging::io::{read_array, write_array, DatasetError, Role};
use crate::{MolError, Real, Result};

const CHECKPOINT_FORMAT: &str = "molk-weights-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerManifest {
    in_ch: usize,
    out_ch: usize,
    kernel_size: usize,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub mode: ConstraintMode,
    pub m_target: f64,
    pub depth: usize,
    pub channels: usize,
    pub activation: Activation,
    pub reference_size: usize,
    layers: Vec<LayerManifest>,
}

fn layer_file(dir: &Path, l: usize) -> std::path::PathBuf {
    dir.join(format!("layer_{l:02}.molk"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> MolError + '_ {
    move |source| {
        MolError::Dataset(DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn save_checkpoint<T: Real>(dir: &Path, net: &DenoiserNet<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let hidden_act = net
        .layers()
        .iter()
        .map(|l| l.activation)
        .find(|a| *a != Activation::Identity)
        .unwrap_or(Activation::Identity);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        mode: net.mode,
        m_target: net.m_target.as_f64(),
        depth: net.depth(),
        channels: net.channels(),
        activation: hidden_act,
        reference_size: SN_REFERENCE_SIZE,
        layers: net
            .layers()
            .iter()
            .map(|l| LayerManifest {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                kernel_size: l.ksize,
                activation: l.activation,
            })
            .collect(),
    };
    for (l, layer) in net.layers().iter().enumerate() {
        let row = layer.in_ch * layer.ksize * layer.ksize;
        let mut data = Vec::with_capacity(layer.out_ch * (row + 1));
        for o in 0..layer.out_ch {
            data.extend(layer.kernel[o * row..(o + 1) * row].iter().map(|&w| Complex::new(w, T::zero())));
            data.push(Complex::new(layer.bias[o], T::zero()));
        }
        write_array(&layer_file(dir, l), Role::Weights, &[layer.out_ch, row + 1], &data)?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io(&path))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(io(&path))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(DatasetError::UnsupportedVersion(manifest.format).into());
    }
    Ok(manifest)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<DenoiserNet<T>> {
    let manifest = read_checkpoint_manifest(dir)?;
    if manifest.layers.len() != manifest.depth {
        return Err(DatasetError::InvalidContents("depth disagrees with layer list".into()).into());
    }
    let mut layers = Vec::with_capacity(manifest.depth);
    for (l, lm) in manifest.layers.iter().enumerate() {
        let (header, data) = read_array::<T>(&layer_file(dir, l))?;
        if header.role != Role::Weights {
            return Err(DatasetError::RoleMismatch {
                expected: Role::Weights,
                actual: header.role,
            }
            .into());
        }
        let row = lm.in_ch * lm.kernel_size * lm.kernel_size;
        if header.shape != [lm.out_ch, row + 1] {
            return Err(MolError::ShapeMismatch {
                expected: vec![lm.out_ch, row + 1],
                actual: header.shape,
            });
        }
        let mut layer = ConvLayer::zeros(lm.in_ch, lm.out_ch, lm.kernel_size, lm.activation);
        for o in 0..lm.out_ch {
            let rec = &data[o * (row + 1)..(o + 1) * (row + 1)];
            for (w, z) in layer.kernel[o * row..(o + 1) * row].iter_mut().zip(rec) {
                *w = z.re;
            }
            layer.bias[o] = rec[row].re;
        }
        layers.push(layer);
    }
    DenoiserNet::new(layers, manifest.mode, T::lit(manifest.m_target))
}
