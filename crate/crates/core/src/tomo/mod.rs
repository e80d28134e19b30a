//! Parallel-beam tomography: geometry, the discrete ray transform and its
//! matched adjoint, filtered back-projection, and measurement noise.
//!
//! Images live on the square `[-1, 1]^2` with pixel size `2 / n`; a line
//! integral through a unit-intensity disc of radius `r` therefore reads `2r`.

mod fbp;
mod projector;

pub use fbp::{fbp, fbp_with, FbpWindow};
pub use projector::RayTransform;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub image_size: usize,
    pub num_angles: usize,
    /// Degrees, inclusive.
    pub angle_start: f64,
    /// Degrees, exclusive.
    pub angle_end: f64,
    pub num_detectors: usize,
    /// Detector bin width in pixel units.
    pub detector_spacing: f64,
}

impl Geometry {
    pub fn new(
        image_size: usize,
        num_angles: usize,
        angle_start: f64,
        angle_end: f64,
        num_detectors: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        let g = Geometry {
            image_size,
            num_angles,
            angle_start,
            angle_end,
            num_detectors,
            detector_spacing,
        };
        g.validate()?;
        Ok(g)
    }

    /// `num_angles` directions spread uniformly over `[0, 180)`.
    pub fn sparse_view(image_size: usize, num_angles: usize) -> Result<Self> {
        Self::new(
            image_size,
            num_angles,
            0.0,
            180.0,
            default_detectors(image_size),
            1.0,
        )
    }

    /// Directions over `[start, end)` degrees, one per degree of range.
    pub fn limited_angle(image_size: usize, start: f64, end: f64) -> Result<Self> {
        let n = (end - start).round().max(1.0) as usize;
        Self::new(image_size, n, start, end, default_detectors(image_size), 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_angles == 0 {
            return Err(Error::Config("geometry needs at least one angle".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(0.0 <= self.angle_start && self.angle_start < self.angle_end && self.angle_end <= 180.0) {
            return Err(Error::Config(format!(
                "angle range [{}, {}) must satisfy 0 <= start < end <= 180",
                self.angle_start, self.angle_end
            )));
        }
        if self.num_detectors < self.image_size {
            return Err(Error::Config(format!(
                "{} detectors cannot cover a {}-pixel image",
                self.num_detectors, self.image_size
            )));
        }
        if !(self.detector_spacing > 0.0) {
            return Err(Error::Config("detector spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 / self.image_size as f64
    }

    /// Physical detector bin width.
    pub fn bin_width(&self) -> f64 {
        self.detector_spacing * self.pixel_size()
    }

    pub fn angle_step_rad(&self) -> f64 {
        (self.angle_end - self.angle_start).to_radians() / self.num_angles as f64
    }

    pub fn angles_rad(&self) -> Vec<f64> {
        let step = self.angle_step_rad();
        (0..self.num_angles)
            .map(|i| self.angle_start.to_radians() + i as f64 * step)
            .collect()
    }

    /// Signed physical offset of detector bin `k` from the rotation centre.
    pub fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.num_detectors as f64 - 1.0) / 2.0) * self.bin_width()
    }

    pub fn sinogram_len(&self) -> usize {
        self.num_angles * self.num_detectors
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[6],
            vec![
                self.image_size as f64,
                self.num_angles as f64,
                self.angle_start,
                self.angle_end,
                self.num_detectors as f64,
                self.detector_spacing,
            ],
        )
        .expect("six fields")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 6 {
            return Err(Error::Format(format!("geometry entry has {} fields", d.len())));
        }
        Self::new(d[0] as usize, d[1] as usize, d[2], d[3], d[4] as usize, d[5])
    }
}

/// Detector count covering the full image diagonal.
pub fn default_detectors(image_size: usize) -> usize {
    (std::f64::consts::SQRT_2 * image_size as f64).ceil() as usize
}

/// Line-integral measurements indexed by `(angle, detector bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: &Geometry) -> Self {
        Sinogram {
            data: vec![0.0; geometry.sinogram_len()],
            geometry: geometry.clone(),
        }
    }

    pub fn from_vec(geometry: &Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.sinogram_len() {
            return Err(Error::dim(
                "Sinogram::from_vec",
                &[geometry.num_angles, geometry.num_detectors],
                &[data.len()],
            ));
        }
        Ok(Sinogram {
            geometry: geometry.clone(),
            data,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        let nd = self.geometry.num_detectors;
        &self.data[angle * nd..(angle + 1) * nd]
    }

    pub fn check_geometry(&self, g: &Geometry, op: &'static str) -> Result<()> {
        if &self.geometry != g {
            return Err(Error::dim(
                op,
                &[g.num_angles, g.num_detectors],
                &[self.geometry.num_angles, self.geometry.num_detectors],
            ));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.geometry.num_angles, self.geometry.num_detectors],
            self.data.clone(),
        )
        .expect("sinogram extents")
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = Container::new();
        c.insert("sinogram", self.to_tensor());
        c.insert("geometry", self.geometry.to_tensor());
        c.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = Container::read(path)?;
        let g = Geometry::from_tensor(c.require("geometry")?)?;
        Sinogram::from_vec(&g, c.require("sinogram")?.data().to_vec())
    }
}

pub fn radon_forward(x: &Image, g: &Geometry) -> Result<Sinogram> {
    RayTransform::new(g)?.forward(x)
}

pub fn radon_adjoint(y: &Sinogram, g: &Geometry) -> Result<Image> {
    RayTransform::new(g)?.adjoint(y)
}

/// `A^T (A x - y)`, the gradient of `0.5 ||A x - y||^2`.
pub fn data_fidelity_gradient(op: &RayTransform, x: &Image, y: &Sinogram) -> Result<Image> {
    let mut r = op.forward(x)?;
    y.check_geometry(op.geometry(), "data_fidelity_gradient")?;
    r.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(a, b)| *a -= b);
    op.adjoint(&r)
}

/// Add zero-mean Gaussian noise with std `level * mean(|y|)`.
pub fn add_noise(y: &Sinogram, level: f64, seed: u64) -> Sinogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with(y, level, &mut rng)
}

pub fn add_noise_with(y: &Sinogram, level: f64, rng: &mut impl rand::Rng) -> Sinogram {
    let mut out = y.clone();
    if level == 0.0 {
        return out;
    }
    let scale = level * y.data.iter().map(|v| v.abs()).sum::<f64>() / y.data.len().max(1) as f64;
    for v in out.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += scale * e;
    }
    out
}

pub fn save_image(x: &Image, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut c = Container::new();
    c.insert("image", x.to_tensor());
    c.write(path)
}

pub fn load_image(path: impl AsRef<std::path::Path>) -> Result<Image> {
    Image::from_tensor(Container::read(path)?.require("image")?)
}
