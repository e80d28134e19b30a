//! Joseph-style ray marching stored as a sparse matrix.
//!
//! Each ray steps along whichever image axis it crosses fastest; at every step
//! the image is sampled by linear interpolation between the two neighbouring
//! pixels of the other axis, weighted by the path length of the step. The
//! weights are stored once in CSR form and the adjoint uses the explicit
//! transpose of the same matrix.

use super::{Geometry, Sinogram};
use crate::error::Result;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// `out = M x`. Panics if the lengths disagree with the matrix shape.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "SparseMatrix::apply input length");
        assert_eq!(out.len(), self.rows, "SparseMatrix::apply output length");
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *o = self.col_idx[a..b]
                .iter()
                .zip(&self.values[a..b])
                .map(|(&c, &w)| w * x[c as usize])
                .sum();
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.values.len()];
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k] as usize;
                col_idx[next[c]] = r as u32;
                values[next[c]] = self.values[k];
                next[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

/// The discrete ray transform `A` for one geometry, with its adjoint.
#[derive(Debug, Clone)]
pub struct RayTransform {
    geometry: Geometry,
    matrix: SparseMatrix,
    transposed: SparseMatrix,
}

impl RayTransform {
    pub fn new(geometry: &Geometry) -> Result<Self> {
        geometry.validate()?;
        let matrix = build_matrix(geometry);
        let transposed = matrix.transpose();
        Ok(RayTransform {
            geometry: geometry.clone(),
            matrix,
            transposed,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn transposed(&self) -> &SparseMatrix {
        &self.transposed
    }

    pub fn forward(&self, x: &Image) -> Result<Sinogram> {
        x.check_size(self.geometry.image_size, "radon_forward")?;
        let mut y = Sinogram::zeros(&self.geometry);
        self.matrix.apply(x.data(), y.data_mut());
        Ok(y)
    }

    pub fn adjoint(&self, y: &Sinogram) -> Result<Image> {
        y.check_geometry(&self.geometry, "radon_adjoint")?;
        let mut x = Image::zeros(self.geometry.image_size);
        self.transposed.apply(y.data(), x.data_mut());
        Ok(x)
    }

    /// Largest singular value of `A`, by power iteration on `A^T A`.
    pub fn norm_estimate(&self, iterations: usize) -> f64 {
        let n = self.geometry.image_size;
        let mut x = vec![1.0 / n as f64; n * n];
        let mut y = vec![0.0; self.matrix.rows];
        let mut norm_sq = 0.0;
        for _ in 0..iterations.max(1) {
            self.matrix.apply(&x, &mut y);
            let mut z = vec![0.0; n * n];
            self.transposed.apply(&y, &mut z);
            norm_sq = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm_sq == 0.0 {
                return 0.0;
            }
            x = z.into_iter().map(|v| v / norm_sq).collect();
        }
        norm_sq.sqrt()
    }
}

fn build_matrix(g: &Geometry) -> SparseMatrix {
    let n = g.image_size;
    let h = g.pixel_size();
    let mut row_ptr = Vec::with_capacity(g.sinogram_len() + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);

    for theta in g.angles_rad() {
        let (sin, cos) = theta.sin_cos();
        for k in 0..g.num_detectors {
            let s = g.detector_offset(k);
            // Points on the ray: p = s (cos, sin) + t (-sin, cos).
            if cos.abs() >= sin.abs() {
                let step = h / cos.abs();
                for row in 0..n {
                    let y = 1.0 - (row as f64 + 0.5) * h;
                    let t = (y - s * sin) / cos;
                    let x = s * cos - t * sin;
                    let u = (x + 1.0) / h - 0.5;
                    push_interp(u, n, step, |c| row * n + c, &mut col_idx, &mut values);
                }
            } else {
                let step = h / sin.abs();
                for col in 0..n {
                    let x = (col as f64 + 0.5) * h - 1.0;
                    let t = (s * cos - x) / sin;
                    let y = s * sin + t * cos;
                    let v = (1.0 - y) / h - 0.5;
                    push_interp(v, n, step, |r| r * n + col, &mut col_idx, &mut values);
                }
            }
            sort_row(&mut col_idx, &mut values, *row_ptr.last().unwrap());
            row_ptr.push(values.len());
        }
    }
    SparseMatrix {
        rows: g.sinogram_len(),
        cols: n * n,
        row_ptr,
        col_idx,
        values,
    }
}

fn sort_row(col_idx: &mut [u32], values: &mut [f64], start: usize) {
    let mut pairs: Vec<(u32, f64)> = col_idx[start..]
        .iter()
        .copied()
        .zip(values[start..].iter().copied())
        .collect();
    pairs.sort_by_key(|p| p.0);
    for (i, (c, v)) in pairs.into_iter().enumerate() {
        col_idx[start + i] = c;
        values[start + i] = v;
    }
}

fn push_interp(
    u: f64,
    n: usize,
    step: f64,
    index: impl Fn(usize) -> usize,
    col_idx: &mut Vec<u32>,
    values: &mut Vec<f64>,
) {
    let lo = u.floor();
    let frac = u - lo;
    let lo = lo as isize;
    for (i, w) in [(lo, 1.0 - frac), (lo + 1, frac)] {
        if i >= 0 && (i as usize) < n && w > 0.0 {
            col_idx.push(index(i as usize) as u32);
            values.push(w * step);
        }
    }
}
