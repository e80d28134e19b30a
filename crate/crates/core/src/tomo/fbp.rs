//! Filtered back-projection with a Ram-Lak ramp filter.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Geometry, Sinogram};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FbpWindow {
    /// Plain Ram-Lak.
    #[default]
    None,
    /// Ram-Lak apodized by a Hann window reaching zero at Nyquist.
    Hann,
}

/// FBP with the plain Ram-Lak ramp.
pub fn fbp(y: &Sinogram, g: &Geometry) -> Result<Image> {
    fbp_with(y, g, FbpWindow::default())
}

pub fn fbp_with(y: &Sinogram, g: &Geometry, window: FbpWindow) -> Result<Image> {
    if g.num_angles == 0 {
        return Err(Error::Config("fbp needs at least one angle".into()));
    }
    y.check_geometry(g, "fbp")?;
    let filtered = filter_rows(y, g, window);
    let mut x = backproject(&filtered, g);
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
    Ok(x)
}

/// Frequency response of the band-limited ramp, built from its spatial
/// samples so the DC term is exact.
fn ramp_response(len: usize, tau: f64, window: FbpWindow) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    for (i, k) in kernel.iter_mut().enumerate() {
        let offset = if i <= len / 2 { i as i64 } else { i as i64 - len as i64 };
        let v = if offset == 0 {
            1.0 / (4.0 * tau * tau)
        } else if offset % 2 != 0 {
            -1.0 / (PI * PI * (offset * offset) as f64 * tau * tau)
        } else {
            0.0
        };
        *k = Complex::new(v, 0.0);
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let f = if i <= len / 2 { i as f64 } else { len as f64 - i as f64 } / len as f64;
            let w = match window {
                FbpWindow::None => 1.0,
                FbpWindow::Hann => 0.5 + 0.5 * (2.0 * PI * f).cos(),
            };
            k.re * w
        })
        .collect()
}

fn filter_rows(y: &Sinogram, g: &Geometry, window: FbpWindow) -> Vec<f64> {
    let nd = g.num_detectors;
    let len = (2 * nd).next_power_of_two();
    let tau = g.bin_width();
    let response = ramp_response(len, tau, window);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Vec::with_capacity(y.data().len());
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for a in 0..g.num_angles {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(y.row(a)) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&response) {
            *b *= r;
        }
        inv.process(&mut buf);
        // Unnormalized inverse FFT; tau converts the discrete convolution to an integral.
        out.extend(buf[..nd].iter().map(|c| c.re * tau / len as f64));
    }
    out
}

/// Pixel-driven back-projection with linear detector interpolation.
fn backproject(q: &[f64], g: &Geometry) -> Image {
    let n = g.image_size;
    let nd = g.num_detectors;
    let tau = g.bin_width();
    let centre = (nd as f64 - 1.0) / 2.0;
    let mut x = Image::zeros(n);
    for (a, theta) in g.angles_rad().into_iter().enumerate() {
        let (sin, cos) = theta.sin_cos();
        let row = &q[a * nd..(a + 1) * nd];
        for r in 0..n {
            for c in 0..n {
                let (px, py) = Image::pixel_center(n, r, c);
                let u = (px * cos + py * sin) / tau + centre;
                let lo = u.floor();
                let f = u - lo;
                let lo = lo as isize;
                let at = |i: isize| {
                    if i >= 0 && (i as usize) < nd {
                        row[i as usize]
                    } else {
                        0.0
                    }
                };
                let v = (1.0 - f) * at(lo) + f * at(lo + 1);
                x.data_mut()[r * n + c] += v;
            }
        }
    }
    let scale = g.angle_step_rad();
    x.data_mut().iter_mut().for_each(|v| *v *= scale);
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = Geometry::sparse_view(16, 8).unwrap();
        let x = fbp(&Sinogram::zeros(&g), &g).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_has_zero_dc() {
        let r = ramp_response(64, 0.1, FbpWindow::None);
        let peak = r.iter().cloned().fold(0.0, f64::max);
        assert!(r[0].abs() < 0.02 * peak);
        assert!(r.iter().all(|&v| v >= -1e-9));
    }
}
