//! Monte-Carlo predictive inference and uncertainty decomposition.
//!
//! For `t = 1..T` a full weight draw `Theta_t` is pushed through the cascade.
//! The predictive mean is the average reconstruction, the epistemic map the
//! (biased, `1/T`) variance of the reconstructions, and the aleatoric map the
//! average predicted noise variance. Their sum is the total variance.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::cascade::Cascade;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{purpose, stream_rng};
use crate::tomo::{save_image, RayTransform, Sinogram};

/// Default number of Monte-Carlo samples.
pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    pub mean: Image,
    pub total: Image,
    pub aleatoric: Image,
    pub epistemic: Image,
    pub samples: usize,
    /// Per-draw reconstructions, kept on request.
    pub draws: Option<Vec<Image>>,
}

/// Welford accumulator over images.
struct Moments {
    mean: Vec<f64>,
    m2: Vec<f64>,
    noise: Vec<f64>,
    count: usize,
    draws: Option<Vec<Image>>,
}

impl Moments {
    fn new(size: usize, keep: bool) -> Self {
        Moments {
            mean: vec![0.0; size * size],
            m2: vec![0.0; size * size],
            noise: vec![0.0; size * size],
            count: 0,
            draws: keep.then(Vec::new),
        }
    }

    fn push(&mut self, x: Image, logvar: &Image) {
        self.count += 1;
        let k = self.count as f64;
        for (i, &v) in x.data().iter().enumerate() {
            let delta = v - self.mean[i];
            self.mean[i] += delta / k;
            self.m2[i] += delta * (v - self.mean[i]);
        }
        for (a, &l) in self.noise.iter_mut().zip(logvar.data()) {
            *a += l.exp();
        }
        if let Some(d) = self.draws.as_mut() {
            d.push(x);
        }
    }

    fn finish(self, n: usize) -> Result<PredictiveResult> {
        let t = self.count as f64;
        let epistemic: Vec<f64> = self.m2.iter().map(|m| (m / t).max(0.0)).collect();
        let aleatoric: Vec<f64> = self.noise.iter().map(|s| s / t).collect();
        let total = epistemic.iter().zip(&aleatoric).map(|(e, a)| e + a).collect();
        Ok(PredictiveResult {
            mean: Image::from_vec(n, self.mean)?,
            total: Image::from_vec(n, total)?,
            aleatoric: Image::from_vec(n, aleatoric)?,
            epistemic: Image::from_vec(n, epistemic)?,
            samples: self.count,
            draws: self.draws,
        })
    }
}

/// Predictive moments for one measurement.
pub fn mc_predict(
    cascade: &Cascade,
    op: &RayTransform,
    y: &Sinogram,
    x0: &Image,
    samples: usize,
    seed: u64,
) -> Result<PredictiveResult> {
    let mut out = mc_predict_batch(cascade, op, &[y], std::slice::from_ref(x0), samples, seed, false)?;
    Ok(out.remove(0))
}

/// Predictive moments for many measurements. Draw `t` uses the same weights
/// for every measurement, so each result equals its single-measurement
/// [`mc_predict`] counterpart.
pub fn mc_predict_batch(
    cascade: &Cascade,
    op: &RayTransform,
    ys: &[&Sinogram],
    x0s: &[Image],
    samples: usize,
    seed: u64,
    keep_draws: bool,
) -> Result<Vec<PredictiveResult>> {
    if samples == 0 {
        return Err(Error::Contract("at least one Monte-Carlo sample is required".into()));
    }
    if cascade.is_empty() {
        return Err(Error::Contract("cascade has no blocks".into()));
    }
    if ys.len() != x0s.len() || ys.is_empty() {
        return Err(Error::Contract(format!("{} sinograms for {} initial images", ys.len(), x0s.len())));
    }
    let n = x0s[0].size();
    let mut acc: Vec<Moments> = (0..ys.len()).map(|_| Moments::new(n, keep_draws)).collect();
    for t in 0..samples {
        let noise = cascade.draw_noise(&mut stream_rng(seed, t as u64, purpose::PREDICT));
        let (xs, lvs) = cascade.forward_batch(op, ys, x0s, &noise)?;
        for ((m, x), lv) in acc.iter_mut().zip(xs).zip(&lvs) {
            m.push(x, lv);
        }
    }
    acc.into_iter().map(|m| m.finish(n)).collect()
}

/// Single deterministic pass with every Bayesian layer at its posterior mean.
pub fn posterior_mean_reconstruction(cascade: &Cascade, op: &RayTransform, y: &Sinogram, x0: &Image) -> Result<Image> {
    let noise: Vec<_> = cascade.blocks.iter().map(|b| b.zero_noise()).collect();
    Ok(cascade.forward(op, y, x0, &noise)?.image)
}

/// Names and normalization bounds of exported maps.
pub const BOUNDS_FILE: &str = "bounds.txt";

/// Write an image as 8-bit grayscale, mapping `[lo, hi]` to `[0, 255]`.
pub fn write_png(image: &Image, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = image.size() as u32;
    let range = hi - lo;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), n, n);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Read an 8-bit grayscale PNG back into values using bounds `[lo, hi]`.
pub fn read_png(path: impl AsRef<Path>, lo: f64, hi: f64) -> Result<Image> {
    let decoder = png::Decoder::new(File::open(path)?);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight || info.width != info.height {
        return Err(Error::Png(format!(
            "expected square 8-bit grayscale, found {:?}/{:?} {}x{}",
            info.color_type, info.bit_depth, info.width, info.height
        )));
    }
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|&b| lo + (hi - lo) * b as f64 / 255.0)
        .collect();
    Image::from_vec(info.width as usize, data)
}

/// Parse a bounds sidecar into `(name, lo, hi)` triples.
pub fn read_bounds(path: impl AsRef<Path>) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad bound {s:?} in {l:?}")));
            match f.as_slice() {
                [name, lo, hi] => Ok((name.to_string(), parse(lo)?, parse(hi)?)),
                _ => Err(Error::Format(format!("bounds line {l:?} needs `name min max`"))),
            }
        })
        .collect()
}

/// Write `mean`, `aleatoric`, `epistemic` and `total` as raw containers
/// (`<name>.bdgd`) and min-max normalized PNGs (`<name>.png`), with the
/// normalization bounds in a sidecar text file. Returns the written paths.
pub fn save_uncertainty_maps(result: &PredictiveResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut bounds = String::new();
    let mut written = Vec::new();
    for (name, map) in [
        ("mean", &result.mean),
        ("aleatoric", &result.aleatoric),
        ("epistemic", &result.epistemic),
        ("total", &result.total),
    ] {
        let raw = dir.join(format!("{name}.bdgd"));
        save_image(map, &raw)?;
        let (lo, hi) = map.min_max();
        let png_path = dir.join(format!("{name}.png"));
        write_png(map, lo, hi, &png_path)?;
        writeln!(bounds, "{name} {lo:e} {hi:e}").expect("writing to a String");
        written.extend([raw, png_path]);
    }
    let sidecar = dir.join(BOUNDS_FILE);
    std::fs::write(&sidecar, bounds)?;
    written.push(sidecar);
    Ok(written)
}
