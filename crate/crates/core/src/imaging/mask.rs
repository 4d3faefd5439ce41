use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{MolError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    CartesianVariableDensity,
    PoissonDensity,
    Uniform,
    Full,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::CartesianVariableDensity,
        MaskKind::PoissonDensity,
        MaskKind::Uniform,
        MaskKind::Full,
    ];
}

/// Binary k-space sampling pattern of shape `(H, W)` or `(H, W, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    frames: usize,
    data: Vec<bool>,
    pub acceleration: f64,
    pub kind: MaskKind,
}

impl SamplingMask {
    pub fn new(shape: &[usize], data: Vec<bool>, acceleration: f64, kind: MaskKind) -> Result<Self> {
        crate::imaging::check_image_shape(shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(MolError::invalid("mask data does not match its shape"));
        }
        Ok(SamplingMask {
            height: shape[0],
            width: shape[1],
            frames: shape.get(2).copied().unwrap_or(1),
            data,
            acceleration,
            kind,
        })
    }

    pub fn full(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        SamplingMask::new(shape, vec![true; n], 1.0, MaskKind::Full).expect("valid shape")
    }

    pub fn empty(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        SamplingMask::new(shape, vec![false; n], f64::INFINITY, MaskKind::Uniform)
            .expect("valid shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.frames == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.frames]
        }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Mask of frame `t` as a contiguous `H×W` slice of flags.
    pub fn frame(&self, t: usize) -> Vec<bool> {
        let mut out = vec![false; self.height * self.width];
        super::gather_frame(&self.data, self.frames, t, &mut out);
        out
    }
}

fn normalized_radius2(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let y = (i as f64 - (h / 2) as f64) / (h as f64 / 2.0);
    let x = (j as f64 - (w / 2) as f64) / (w as f64 / 2.0);
    x * x + y * y
}

/// Standard deviation of the Gaussian sampling density in units of the grid
/// half-width.
const DENSITY_SIGMA: f64 = 0.25;

/// Draws a 2-D sampling mask with a fully sampled central square of side
/// `center_fraction·min(H, W)` and `round(HW/acceleration)` samples in total.
///
/// The variable-density kind samples the remaining budget without replacement
/// with weights following an isotropic Gaussian in k-space radius. The
/// Poisson kind uses dart throwing with a minimum distance that grows with
/// radius, scaled by bisection to hit the budget.
pub fn generate_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    kind: MaskKind,
    seed: u64,
    center_fraction: f64,
) -> Result<SamplingMask> {
    if height == 0 || width == 0 {
        return Err(MolError::invalid("mask needs positive extents"));
    }
    if !(acceleration >= 1.0) || !acceleration.is_finite() {
        return Err(MolError::invalid(format!("acceleration must be >= 1, got {acceleration}")));
    }
    if !(0.0..=0.5).contains(&center_fraction) {
        return Err(MolError::invalid(format!(
            "center fraction must lie in [0, 0.5], got {center_fraction}"
        )));
    }
    let n = height * width;
    let shape = [height, width];
    if kind == MaskKind::Full || acceleration == 1.0 {
        return SamplingMask::new(&shape, vec![true; n], 1.0, kind);
    }
    let target = ((n as f64) / acceleration).round() as usize;
    let side = (center_fraction * height.min(width) as f64).round() as usize;
    if side * side > target {
        return Err(MolError::invalid(format!(
            "central region of {} samples exceeds the budget of {target}",
            side * side
        )));
    }
    let mut data = vec![false; n];
    let (i0, j0) = (height / 2 - side / 2, width / 2 - side / 2);
    for i in i0..i0 + side {
        for j in j0..j0 + side {
            data[i * width + j] = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        MaskKind::CartesianVariableDensity | MaskKind::Uniform => {
            let remaining = target - side * side;
            // Weighted sampling without replacement (Efraimidis–Spirakis keys).
            let mut keyed: Vec<(f64, usize)> = (0..n)
                .filter(|&p| !data[p])
                .map(|p| {
                    let weight = if kind == MaskKind::Uniform {
                        1.0
                    } else {
                        let r2 = normalized_radius2(p / width, p % width, height, width);
                        (-r2 / (2.0 * DENSITY_SIGMA * DENSITY_SIGMA)).exp()
                    };
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    (u.ln() / weight, p)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, p) in keyed.iter().take(remaining) {
                data[p] = true;
            }
        }
        MaskKind::PoissonDensity => {
            poisson_fill(&mut data, height, width, target, &mut rng);
        }
        MaskKind::Full => unreachable!(),
    }
    SamplingMask::new(&shape, data, acceleration, kind)
}

fn dart_throw(base: &[bool], h: usize, w: usize, r0: f64, order: &[usize]) -> Vec<bool> {
    let mut out = base.to_vec();
    for &p in order {
        if out[p] {
            continue;
        }
        let (i, j) = (p / w, p % w);
        let r = r0 * (1.0 + 2.0 * normalized_radius2(i, j, h, w).sqrt());
        let reach = r.ceil() as isize;
        let mut free = true;
        'scan: for di in -reach..=reach {
            for dj in -reach..=reach {
                let (ii, jj) = (i as isize + di, j as isize + dj);
                if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                    continue;
                }
                if ((di * di + dj * dj) as f64) < r * r && out[ii as usize * w + jj as usize] {
                    free = false;
                    break 'scan;
                }
            }
        }
        if free {
            out[p] = true;
        }
    }
    out
}

fn poisson_fill(data: &mut Vec<bool>, h: usize, w: usize, target: usize, rng: &mut ChaCha8Rng) {
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(rng);
    let count = |m: &[bool]| m.iter().filter(|&&v| v).count();
    let (mut lo, mut hi) = (0.0f64, (h.max(w)) as f64);
    let mut best = dart_throw(data, h, w, lo, &order);
    let mut best_gap = count(&best).abs_diff(target);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let cand = dart_throw(data, h, w, mid, &order);
        let c = count(&cand);
        if c.abs_diff(target) < best_gap {
            best_gap = c.abs_diff(target);
            best = cand;
        }
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if best_gap == 0 {
            break;
        }
    }
    // Bisection on a discrete count may still miss by a few samples; trim or
    // top up at random so the budget is met exactly.
    let center = data.clone();
    let mut c = count(&best);
    for &p in &order {
        if c == target {
            break;
        }
        if c > target && best[p] && !center[p] {
            best[p] = false;
            c -= 1;
        } else if c < target && !best[p] {
            best[p] = true;
            c += 1;
        }
    }
    *data = best;
}

/// Per-frame masks for dynamic (2-D + time) acquisitions; frame `t` uses
/// seed `seed + t` when `time_varying`, otherwise every frame shares `seed`.
pub fn generate_dynamic_mask(
    height: usize,
    width: usize,
    frames: usize,
    acceleration: f64,
    kind: MaskKind,
    seed: u64,
    center_fraction: f64,
    time_varying: bool,
) -> Result<SamplingMask> {
    if frames == 0 {
        return Err(MolError::invalid("dynamic mask needs at least one frame"));
    }
    let mut data = vec![false; height * width * frames];
    for t in 0..frames {
        let s = if time_varying { seed.wrapping_add(t as u64) } else { seed };
        let m = generate_mask(height, width, acceleration, kind, s, center_fraction)?;
        super::scatter_frame(&mut data, frames, t, m.data());
    }
    let shape = if frames == 1 {
        vec![height, width]
    } else {
        vec![height, width, frames]
    };
    SamplingMask::new(&shape, data, acceleration, kind)
}
