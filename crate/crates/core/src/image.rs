//! Square intensity images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `n x n` row-major image. Row 0 is the top of the field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Image {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::dim("Image::from_vec", &[size * size], &[data.len()]));
        }
        Ok(Image { size, data })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                data.push(f(r, c));
            }
        }
        Image { size, data }
    }

    /// Accepts `[n, n]` or `[1, 1, n, n]` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let n = match s {
            [a, b] if a == b => *a,
            [1, 1, a, b] if a == b => *a,
            _ => return Err(Error::dim("Image::from_tensor", &[1, 1, 0, 0], s)),
        };
        Self::from_vec(n, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.size, self.size], self.data.clone()).expect("square image")
    }

    /// `[1, 1, n, n]` view for convolution layers.
    pub fn to_nchw(&self) -> Tensor {
        Tensor::new(&[1, 1, self.size, self.size], self.data.clone()).expect("square image")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.size + col] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn check_size(&self, expected: usize, op: &'static str) -> Result<()> {
        if self.size != expected {
            return Err(Error::dim(op, &[expected, expected], &[self.size, self.size]));
        }
        Ok(())
    }

    /// Physical centre of pixel `(row, col)` on the `[-1, 1]^2` square.
    pub fn pixel_center(size: usize, row: usize, col: usize) -> (f64, f64) {
        let h = 2.0 / size as f64;
        ((col as f64 + 0.5) * h - 1.0, 1.0 - (row as f64 + 0.5) * h)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.size, |r, c| self.get(r, self.size - 1 - c))
    }
}
