//! Image quality metrics.

use crate::error::{Error, Result};
use crate::image::Image;

/// Value returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 200.0;

pub fn mse(x: &Image, reference: &Image) -> Result<f64> {
    x.check_size(reference.size(), "mse")?;
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)` in decibels, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

pub fn mean_psnr<'a>(pairs: impl IntoIterator<Item = (&'a Image, &'a Image)>, peak: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, r) in pairs {
        total += psnr(x, r, peak)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("mean_psnr over an empty set".into()));
    }
    Ok(total / count as f64)
}
