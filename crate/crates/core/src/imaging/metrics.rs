use super::ComplexImage;
use crate::{MolError, Real, Result};

/// Finite stand-in for an infinite PSNR in serialised reports.
pub const PSNR_CAP: f64 = 999.0;

/// Peak signal-to-noise ratio in dB, `20·log10(max|ref| / rms|x − ref|)`.
///
/// Identical inputs yield `f64::INFINITY`.
pub fn psnr<T: Real>(x: &ComplexImage<T>, reference: &ComplexImage<T>) -> Result<f64> {
    x.expect_shape(reference.shape())?;
    let peak = reference.max_abs().as_f64();
    if peak == 0.0 {
        return Err(MolError::invalid("reference image is identically zero"));
    }
    let mse: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (*a - *b).norm_sqr().as_f64())
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// [`psnr`] clamped to [`PSNR_CAP`] for JSON output.
pub fn psnr_capped<T: Real>(x: &ComplexImage<T>, reference: &ComplexImage<T>) -> Result<f64> {
    psnr(x, reference).map(|v| v.min(PSNR_CAP))
}

/// `‖x − ref‖ / ‖ref‖`.
pub fn nrmse<T: Real>(x: &ComplexImage<T>, reference: &ComplexImage<T>) -> Result<f64> {
    x.expect_shape(reference.shape())?;
    Ok((x.sub(reference).norm() / reference.norm()).as_f64())
}
