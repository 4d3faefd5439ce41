//! Conjugate gradient, Picard fixed-point iteration and the closed-form
//! step-size and contraction calculators for the damped MOL iteration.

use serde::{Deserialize, Serialize};

use crate::imaging::ComplexImage;
use crate::{MolError, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Acceleration {
    /// Plain Picard iteration.
    #[default]
    None,
    /// Anderson mixing over the last `depth` residuals. Retains `2·depth`
    /// extra images, so it is excluded from the memory and theory checks.
    Anderson { depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig<T> {
    pub fp_tolerance: T,
    pub fp_max_iterations: usize,
    pub cg_tolerance: T,
    pub cg_max_iterations: usize,
    pub acceleration: Acceleration,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            fp_tolerance: T::lit(1e-5),
            fp_max_iterations: 200,
            cg_tolerance: T::lit(1e-6),
            cg_max_iterations: 50,
            acceleration: Acceleration::None,
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.fp_tolerance > T::zero())
            || !(self.cg_tolerance > T::zero())
            || self.fp_max_iterations == 0
            || self.cg_max_iterations == 0
        {
            return Err(MolError::invalid("solver tolerances and budgets must be positive"));
        }
        if let Acceleration::Anderson { depth } = self.acceleration {
            if depth == 0 {
                return Err(MolError::invalid("Anderson depth must be positive"));
            }
        }
        Ok(())
    }
}

/// Outcome of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointResult<T> {
    pub x_star: ComplexImage<T>,
    /// `‖x_{n+1} − x_n‖ / ‖x_n‖` for every iteration performed.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct CgOutcome<T> {
    pub solution: ComplexImage<T>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `op(y) = rhs` for a Hermitian positive definite `op`.
pub fn conjugate_gradient<T: Real>(
    op: impl Fn(&ComplexImage<T>) -> ComplexImage<T>,
    rhs: &ComplexImage<T>,
    config: &SolverConfig<T>,
) -> Result<ComplexImage<T>> {
    conjugate_gradient_detailed(op, rhs, config).map(|o| o.solution)
}

pub fn conjugate_gradient_detailed<T: Real>(
    op: impl Fn(&ComplexImage<T>) -> ComplexImage<T>,
    rhs: &ComplexImage<T>,
    config: &SolverConfig<T>,
) -> Result<CgOutcome<T>> {
    let b_norm = rhs.norm();
    let mut x = ComplexImage::zeros(rhs.shape());
    if b_norm == T::zero() {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.norm_sqr();
    let tol2 = config.cg_tolerance * config.cg_tolerance * b_norm * b_norm;
    for k in 1..=config.cg_max_iterations {
        let ap = op(&p);
        let pap = p.re_dot(&ap);
        if !(pap > T::zero()) {
            return Err(MolError::invalid("CG operator is not positive definite"));
        }
        let step = rr / pap;
        x.axpy(step, &p);
        r.axpy(-step, &ap);
        let rr_new = r.norm_sqr();
        if rr_new < tol2 {
            return Ok(CgOutcome {
                solution: x,
                iterations: k,
                relative_residual: (rr_new.sqrt() / b_norm).as_f64(),
            });
        }
        let beta = rr_new / rr;
        for (pv, rv) in p.data_mut().iter_mut().zip(r.data()) {
            *pv = *rv + *pv * beta;
        }
        rr = rr_new;
    }
    Err(MolError::CgNotConverged {
        iterations: config.cg_max_iterations,
        residual: (rr.sqrt() / b_norm).as_f64(),
    })
}

fn check_monotonicity(m: f64) -> Result<()> {
    if !(m > 0.0 && m < 1.0) {
        return Err(MolError::invalid(format!("monotonicity m must lie in (0, 1), got {m}")));
    }
    Ok(())
}

/// Largest damping with guaranteed convergence, `2m / (2 − m)²`.
pub fn alpha_max(m: f64) -> Result<f64> {
    check_monotonicity(m)?;
    Ok(2.0 * m / ((2.0 - m) * (2.0 - m)))
}

/// Geometric rate bound `√(1 − 2αm + α²(2 − m)²)`, below one exactly when
/// `α < alpha_max(m)`.
pub fn contraction_rate(alpha: f64, m: f64) -> Result<f64> {
    let amax = alpha_max(m)?;
    if !(alpha > 0.0) {
        return Err(MolError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if alpha >= amax {
        return Err(MolError::invalid(format!(
            "alpha {alpha} >= alpha_max {amax}: rate >= 1, no contraction guarantee"
        )));
    }
    Ok(rate_expression(alpha, m))
}

pub(crate) fn rate_expression(alpha: f64, m: f64) -> f64 {
    (1.0 - 2.0 * alpha * m + alpha * alpha * (2.0 - m) * (2.0 - m)).sqrt()
}

fn relative_update<T: Real>(prev: &ComplexImage<T>, next: &ComplexImage<T>) -> f64 {
    let diff = next.sub(prev).norm().as_f64();
    let base = prev.norm().as_f64();
    // Starting from zero the relative update is measured against the new
    // iterate instead.
    let base = if base > 0.0 { base } else { next.norm().as_f64() };
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Iterates `x ← map(x)` until the relative update drops below
/// `fp_tolerance` or the budget runs out.
///
/// Plain Picard keeps only the current and next iterate alive.
pub fn fixed_point_iterate<T: Real>(
    mut map: impl FnMut(&ComplexImage<T>) -> Result<ComplexImage<T>>,
    x0: ComplexImage<T>,
    config: &SolverConfig<T>,
) -> Result<FixedPointResult<T>> {
    config.validate()?;
    if let Acceleration::Anderson { depth } = config.acceleration {
        return anderson_iterate(map, x0, config, depth);
    }
    let tol = config.fp_tolerance.as_f64();
    let mut x = x0;
    let mut residuals = Vec::new();
    for n in 1..=config.fp_max_iterations {
        let next = map(&x)?;
        if !next.is_finite() {
            return Err(MolError::Divergence { iteration: n });
        }
        let res = relative_update(&x, &next);
        residuals.push(res);
        x = next;
        if res < tol {
            return Ok(FixedPointResult {
                x_star: x,
                residuals,
                iterations: n,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        x_star: x,
        iterations: residuals.len(),
        residuals,
        converged: false,
    })
}

fn anderson_iterate<T: Real>(
    mut map: impl FnMut(&ComplexImage<T>) -> Result<ComplexImage<T>>,
    x0: ComplexImage<T>,
    config: &SolverConfig<T>,
    depth: usize,
) -> Result<FixedPointResult<T>> {
    let tol = config.fp_tolerance.as_f64();
    let mut x = x0;
    let mut residuals = Vec::new();
    let mut d_f: Vec<ComplexImage<T>> = Vec::new();
    let mut d_g: Vec<ComplexImage<T>> = Vec::new();
    let mut prev: Option<(ComplexImage<T>, ComplexImage<T>)> = None;
    for n in 1..=config.fp_max_iterations {
        let g = map(&x)?;
        if !g.is_finite() {
            return Err(MolError::Divergence { iteration: n });
        }
        let f = g.sub(&x);
        if let Some((pf, pg)) = prev.take() {
            d_f.push(f.sub(&pf));
            d_g.push(g.sub(&pg));
            if d_f.len() > depth {
                d_f.remove(0);
                d_g.remove(0);
            }
        }
        let mut next = g.clone();
        if !d_f.is_empty() {
            let gamma = least_squares(&d_f, &f);
            for (k, &c) in gamma.iter().enumerate() {
                next.axpy(-T::lit(c), &d_g[k]);
            }
        }
        let res = relative_update(&x, &next);
        residuals.push(res);
        prev = Some((f, g));
        x = next;
        if res < tol {
            return Ok(FixedPointResult {
                x_star: x,
                residuals,
                iterations: n,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        x_star: x,
        iterations: residuals.len(),
        residuals,
        converged: false,
    })
}

/// Regularised normal-equation solve of `min_γ ‖f − Σ γ_k cols_k‖` in the
/// real inner product.
fn least_squares<T: Real>(cols: &[ComplexImage<T>], f: &ComplexImage<T>) -> Vec<f64> {
    let k = cols.len();
    let mut a = vec![vec![0.0f64; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = cols[i].re_dot(&cols[j]).as_f64();
        }
        a[i][k] = cols[i].re_dot(f).as_f64();
    }
    let scale = (0..k).map(|i| a[i][i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-10 * scale;
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        if d.abs() < f64::MIN_POSITIVE {
            continue;
        }
        for row in 0..k {
            if row != col {
                let factor = a[row][col] / d;
                for c in col..=k {
                    a[row][c] -= factor * a[col][c];
                }
            }
        }
    }
    (0..k)
        .map(|i| if a[i][i].abs() > f64::MIN_POSITIVE { a[i][k] / a[i][i] } else { 0.0 })
        .collect()
}

/// Geometric mean of successive residual ratios over the second half of the
/// history.
pub fn estimate_rate(residuals: &[f64]) -> Result<f64> {
    if residuals.len() < 5 {
        return Err(MolError::invalid(format!(
            "rate estimation needs at least 5 residuals, got {}",
            residuals.len()
        )));
    }
    if residuals.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(MolError::invalid("residuals must be positive and finite"));
    }
    let start = residuals.len() / 2;
    let last = residuals.len() - 1;
    Ok((residuals[last] / residuals[start]).powf(1.0 / (last - start) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(v: f64) -> ComplexImage<f64> {
        ComplexImage::from_fn(1, 1, |_, _| Complex::new(v, 0.0))
    }

    #[test]
    fn cg_identity_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ComplexImage::<f64>::random(&[8, 8], &mut rng);
        let out = conjugate_gradient_detailed(|x| x.clone(), &b, &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.solution.sub(&b).norm() < 1e-14);
    }

    #[test]
    fn cg_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ComplexImage::<f64>::random(&[8, 8], &mut rng);
        let y = conjugate_gradient(|x| x.scaled(1.05), &b, &SolverConfig::default()).unwrap();
        assert!(y.sub(&b.scaled(1.0 / 1.05)).norm() / b.norm() < 1e-10);
    }

    #[test]
    fn cg_zero_rhs_short_circuits() {
        let b = ComplexImage::<f64>::zeros(&[4, 4]);
        let out = conjugate_gradient_detailed(|_| panic!("not called"), &b, &SolverConfig::default())
            .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.solution.norm(), 0.0);
    }

    #[test]
    fn cg_reports_non_convergence() {
        // Spread spectrum with a one-iteration budget cannot converge.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = ComplexImage::<f64>::random(&[4, 4], &mut rng);
        let cfg = SolverConfig {
            cg_max_iterations: 1,
            ..SolverConfig::default()
        };
        let op = |x: &ComplexImage<f64>| {
            let mut y = x.clone();
            for (k, z) in y.data_mut().iter_mut().enumerate() {
                *z *= 1.0 + k as f64;
            }
            y
        };
        assert!(matches!(
            conjugate_gradient(op, &b, &cfg),
            Err(MolError::CgNotConverged { iterations: 1, .. })
        ));
    }

    #[test]
    fn alpha_max_reference_values() {
        assert!((alpha_max(0.1).unwrap() - 0.05540).abs() < 1e-5);
        assert!((alpha_max(3.0 - 5f64.sqrt()).unwrap() - 1.0).abs() < 1e-6);
        assert!((alpha_max(0.5).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert!(alpha_max(0.0).is_err());
        assert!(alpha_max(1.0).is_err());
    }

    #[test]
    fn alpha_max_is_increasing() {
        let vals: Vec<f64> = (1..=100).map(|k| alpha_max(k as f64 / 101.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn contraction_rate_values() {
        let r = contraction_rate(0.05, 0.1).unwrap();
        assert!((r - 0.999025f64.sqrt()).abs() < 1e-12);
        assert!((r - 0.99951).abs() < 1e-5);
        assert!(contraction_rate(1e-8, 0.1).unwrap() > 1.0 - 1e-6);
        let edge = contraction_rate(alpha_max(0.1).unwrap() - 1e-9, 0.1).unwrap();
        assert!(edge < 1.0 && 1.0 - edge < 1e-4);
        assert!(contraction_rate(alpha_max(0.1).unwrap(), 0.1).is_err());
    }

    #[test]
    fn rate_below_one_iff_alpha_below_max() {
        for i in 1..=50 {
            let m = i as f64 / 51.0;
            let amax = alpha_max(m).unwrap();
            for j in 1..=50 {
                let alpha = 2.0 * amax * j as f64 / 51.0;
                let below = rate_expression(alpha, m) < 1.0;
                assert_eq!(below, alpha < amax, "m={m} alpha={alpha}");
                assert_eq!(contraction_rate(alpha, m).is_ok(), alpha < amax);
            }
        }
    }

    #[test]
    fn picard_geometric_series() {
        // Stopping at a relative update of tol leaves an error of about
        // tol·‖x‖·r/(1−r), so the tolerance is tightened by one decade.
        let cfg = SolverConfig {
            fp_tolerance: 1e-6,
            ..SolverConfig::default()
        };
        let res = fixed_point_iterate(|x| Ok(x.scaled(0.5).add(&constant(1.0))), constant(0.0), &cfg)
            .unwrap();
        assert!(res.converged);
        assert!((res.x_star.data()[0].re - 2.0).abs() < 1e-5);
        assert_eq!(res.residuals.len(), res.iterations);
        assert!(*res.residuals.last().unwrap() < 1e-5);
    }

    #[test]
    fn picard_identity_converges_immediately() {
        let res = fixed_point_iterate(|x| Ok(x.clone()), constant(3.0), &SolverConfig::default())
            .unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.residuals, vec![0.0]);
    }

    #[test]
    fn picard_expansive_map_fails() {
        let res = fixed_point_iterate(|x| Ok(x.scaled(2.0)), constant(1.0), &SolverConfig::default())
            .unwrap();
        assert!(!res.converged);
        let blowup = fixed_point_iterate(
            |x| Ok(x.scaled(1e200)),
            constant(1.0),
            &SolverConfig::default(),
        );
        assert!(matches!(blowup, Err(MolError::Divergence { iteration: 2 })));
    }

    #[test]
    fn rate_estimation() {
        let r = estimate_rate(&[1.0, 0.5, 0.25, 0.125, 0.0625]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert!(estimate_rate(&[1.0, 0.5, 0.25, 0.1]).is_err());
        assert!(estimate_rate(&[1.0, 0.5, 0.0, 0.1, 0.1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = ComplexImage::<f64>::random(&[4, 4], &mut rng);
        let shift = ComplexImage::<f64>::random(&[4, 4], &mut rng);
        let cfg = SolverConfig {
            fp_tolerance: 1e-8,
            ..SolverConfig::default()
        };
        let res = fixed_point_iterate(|x| Ok(x.scaled(0.9).add(&shift)), x0, &cfg).unwrap();
        assert!((estimate_rate(&res.residuals).unwrap() - 0.9).abs() < 1e-3);
    }

    #[test]
    fn fixed_point_is_independent_of_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shift = ComplexImage::<f64>::random(&[6, 6], &mut rng);
        let map = |x: &ComplexImage<f64>| {
            let mut y = x.scaled(0.7);
            // A mild nonlinearity that keeps the map a contraction.
            for z in y.data_mut() {
                *z = Complex::new(z.re.sin() * 0.9, z.im * 0.9);
            }
            Ok(y.add(&shift))
        };
        let cfg = SolverConfig::default();
        let a = fixed_point_iterate(map, ComplexImage::random(&[6, 6], &mut rng), &cfg).unwrap();
        let b = fixed_point_iterate(map, ComplexImage::random(&[6, 6], &mut rng), &cfg).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.x_star.sub(&b.x_star).norm() / a.x_star.norm() < 10.0 * 1e-5);
    }

    #[test]
    fn contraction_rate_estimates_stay_below_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &l in &[0.3, 0.6, 0.95] {
            let shift = ComplexImage::<f64>::random(&[5, 5], &mut rng);
            let map = |x: &ComplexImage<f64>| {
                let mut y = x.clone();
                for z in y.data_mut() {
                    *z = Complex::new(l * z.re.tanh(), l * z.im);
                }
                Ok(y.add(&shift))
            };
            let cfg = SolverConfig {
                fp_tolerance: 1e-10,
                fp_max_iterations: 2000,
                ..SolverConfig::default()
            };
            let res = fixed_point_iterate(map, ComplexImage::random(&[5, 5], &mut rng), &cfg).unwrap();
            assert!(estimate_rate(&res.residuals).unwrap() <= l + 0.02);
        }
    }

    #[test]
    fn anderson_converges_faster_on_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shift = ComplexImage::<f64>::random(&[4, 4], &mut rng);
        let map = |x: &ComplexImage<f64>| {
            let mut y = x.clone();
            for (k, z) in y.data_mut().iter_mut().enumerate() {
                *z *= 0.5 + 0.45 * (k as f64 / 15.0);
            }
            Ok(y.add(&shift))
        };
        let plain = SolverConfig {
            fp_tolerance: 1e-10,
            fp_max_iterations: 1000,
            ..SolverConfig::default()
        };
        let anderson = SolverConfig {
            acceleration: Acceleration::Anderson { depth: 5 },
            ..plain
        };
        let a = fixed_point_iterate(map, ComplexImage::zeros(&[4, 4]), &plain).unwrap();
        let b = fixed_point_iterate(map, ComplexImage::zeros(&[4, 4]), &anderson).unwrap();
        assert!(a.converged && b.converged);
        assert!(b.iterations < a.iterations);
        assert!(a.x_star.sub(&b.x_star).norm() < 1e-7);
    }
}
