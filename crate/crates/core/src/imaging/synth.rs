//! Synthetic acquisitions: phantom, coil maps, mask and noisy measurements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::DatasetItem;
use super::{generate_coil_maps, generate_mask, generate_phantom, MaskKind, PhantomKind};
use crate::linops::SenseModel;
use crate::{Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSpec {
    pub height: usize,
    pub width: usize,
    pub ncoils: usize,
    pub acceleration: f64,
    pub mask_kind: MaskKind,
    pub center_fraction: f64,
    /// Standard deviation of each real component of the k-space noise.
    pub noise_sigma: f64,
    pub phantom: PhantomKind,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        AcquisitionSpec {
            height: 64,
            width: 64,
            ncoils: 8,
            acceleration: 4.0,
            mask_kind: MaskKind::CartesianVariableDensity,
            center_fraction: 0.08,
            noise_sigma: 0.01,
            phantom: PhantomKind::SmoothRandom,
        }
    }
}

/// One acquisition; every random component derives from `seed`.
pub fn synthesize<T: Real>(spec: &AcquisitionSpec, seed: u64) -> Result<DatasetItem<T>> {
    let (h, w) = (spec.height, spec.width);
    let image = generate_phantom::<T>(h, w, spec.phantom, seed)?;
    let maps = generate_coil_maps::<T>(h, w, spec.ncoils, seed.wrapping_mul(31).wrapping_add(7))?;
    let mask = generate_mask(h, w, spec.acceleration, spec.mask_kind, seed.wrapping_add(1_000_003), spec.center_fraction)?;
    let model = SenseModel::new(maps, mask)?;
    let mut kspace = model.apply(&image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    kspace.add_noise(model.mask(), T::lit(spec.noise_sigma), &mut rng);
    Ok(DatasetItem {
        image,
        maps: model.maps().clone(),
        mask: model.mask().clone(),
        kspace,
    })
}

/// `count` acquisitions with seeds `seed, seed + 1, …`.
pub fn synthesize_set<T: Real>(spec: &AcquisitionSpec, count: usize, seed: u64) -> Result<Vec<DatasetItem<T>>> {
    (0..count as u64).map(|k| synthesize(spec, seed + k)).collect()
}
