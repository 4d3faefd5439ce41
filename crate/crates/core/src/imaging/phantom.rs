use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ComplexImage;
use crate::{MolError, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Modified (Toft) Shepp–Logan head; the seed only drives the phase.
    SheppLogan,
    /// Random ellipse composition, lightly blurred.
    SmoothRandom,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.x0, y - self.y0);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

const fn ell(intensity: f64, a: f64, b: f64, x0: f64, y0: f64, phi_deg: f64) -> Ellipse {
    Ellipse {
        intensity,
        a,
        b,
        x0,
        y0,
        phi_deg,
    }
}

const SHEPP_LOGAN: [Ellipse; 10] = [
    ell(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    ell(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    ell(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    ell(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    ell(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    ell(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    ell(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    ell(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    ell(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    ell(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Normalised coordinates in `[-1, 1]` with the centre pixel at `⌊N/2⌋`.
fn coords(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    let x = (j as f64 - (w / 2) as f64) / (w as f64 / 2.0);
    let y = ((h / 2) as f64 - i as f64) / (h as f64 / 2.0);
    (x, y)
}

fn rasterize(ellipses: &[Ellipse], h: usize, w: usize) -> Vec<f64> {
    let mut mag = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = coords(i, j, h, w);
            let v: f64 = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            mag[i * w + j] = v.max(0.0);
        }
    }
    mag
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, t) in (-r..=r).zip(&taps) {
                    let (ii, jj) = if along_rows {
                        (i as isize, j as isize + k)
                    } else {
                        (i as isize + k, j as isize)
                    };
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += t * src[ii as usize * w + jj as usize];
                    }
                }
                out[i * w + j] = acc;
            }
        }
        out
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

fn random_ellipses(rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let mut out = vec![ell(
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.6..0.8),
        rng.gen_range(0.75..0.92),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-10.0..10.0),
    )];
    let inner_scale = rng.gen_range(0.88..0.94);
    let outer = out[0];
    out.push(ell(
        -outer.intensity * rng.gen_range(0.55..0.75),
        outer.a * inner_scale,
        outer.b * inner_scale,
        outer.x0,
        outer.y0 - 0.015,
        outer.phi_deg,
    ));
    let n_inner = rng.gen_range(5..10);
    for _ in 0..n_inner {
        let a = rng.gen_range(0.04..0.25);
        let b = rng.gen_range(0.04..0.3);
        out.push(ell(
            rng.gen_range(-0.25..0.35),
            a,
            b,
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.55..0.55),
            rng.gen_range(-90.0..90.0),
        ));
    }
    out
}

/// Smooth low-order polynomial phase seeded by `rng`.
fn phase_coefficients(rng: &mut ChaCha8Rng) -> [f64; 6] {
    let mut c = [0.0; 6];
    for v in &mut c {
        *v = rng.gen_range(-0.6..0.6);
    }
    c
}

/// Synthesises a complex phantom with magnitude in `[0, 1]` (peak exactly 1).
pub fn generate_phantom<T: Real>(
    height: usize,
    width: usize,
    kind: PhantomKind,
    seed: u64,
) -> Result<ComplexImage<T>> {
    if height < 16 || width < 16 {
        return Err(MolError::invalid(format!(
            "phantom dimensions must be at least 16, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = phase_coefficients(&mut rng);
    let mag = match kind {
        PhantomKind::SheppLogan => rasterize(&SHEPP_LOGAN, height, width),
        PhantomKind::SmoothRandom => {
            let ellipses = random_ellipses(&mut rng);
            gaussian_blur(&rasterize(&ellipses, height, width), height, width, 0.8)
        }
    };
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let data = mag
        .iter()
        .enumerate()
        .map(|(p, &m)| {
            let (x, y) = coords(p / width, p % width, height, width);
            let ph = phase[0]
                + phase[1] * x
                + phase[2] * y
                + phase[3] * x * y
                + phase[4] * x * x
                + phase[5] * y * y;
            let v = Complex::from_polar(m / peak, ph);
            Complex::new(T::lit(v.re), T::lit(v.im))
        })
        .collect();
    Ok(ComplexImage::from_parts(vec![height, width], data))
}
