//! Classical reconstruction baselines.
//!
//! FBP lives in [`crate::tomo`]. This module adds TV-regularized least squares
//! `min_{x >= 0} 1/2 ||A x - y||^2 + lambda ||grad x||_1` (anisotropic, forward
//! differences, Neumann boundary) solved with the Chambolle–Pock primal-dual
//! method, and a grid search for `lambda`.
//!
//! The finite-difference operator enters the saddle-point problem scaled by
//! `c = ||A|| / sqrt(8)` (with `lambda / c` in the dual constraint) so that both
//! halves of the stacked operator have comparable norms; the minimizer is
//! unchanged.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::tomo::{fbp, Geometry, RayTransform, Sinogram};

/// Squared norm bound of the 2D forward-difference operator.
const GRAD_NORM_SQ: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TVConfig {
    pub lambda: f64,
    /// Primal step; `None` picks `0.99 / L`.
    pub tau: Option<f64>,
    /// Dual step; `None` picks `0.99 / L`.
    pub sigma: Option<f64>,
    pub max_iterations: usize,
    /// Stop once `||x_new - x|| / ||x|| < tolerance`.
    pub tolerance: f64,
    /// Record the objective after every iteration.
    pub track_objective: bool,
}

impl TVConfig {
    pub fn new(lambda: f64) -> Self {
        TVConfig {
            lambda,
            tau: None,
            sigma: None,
            max_iterations: 500,
            tolerance: 1e-6,
            track_objective: false,
        }
    }
}

/// Anisotropic TV: sum of absolute forward differences.
pub fn total_variation(x: &Image) -> f64 {
    let n = x.size();
    let mut tv = 0.0;
    for r in 0..n {
        for c in 0..n {
            let v = x.get(r, c);
            if c + 1 < n {
                tv += (x.get(r, c + 1) - v).abs();
            }
            if r + 1 < n {
                tv += (x.get(r + 1, c) - v).abs();
            }
        }
    }
    tv
}

/// `1/2 ||A x - y||^2 + lambda * TV(x)`.
pub fn tv_objective(op: &RayTransform, x: &Image, y: &Sinogram, lambda: f64) -> Result<f64> {
    let ax = op.forward(x)?;
    let fit: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(0.5 * fit + lambda * total_variation(x))
}

/// Forward differences `(dx, dy)` scaled by `c`, zero on the far boundary.
fn gradient(x: &[f64], n: usize, c: f64, gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..n {
        for col in 0..n {
            let i = r * n + col;
            gx[i] = if col + 1 < n { c * (x[i + 1] - x[i]) } else { 0.0 };
            gy[i] = if r + 1 < n { c * (x[i + n] - x[i]) } else { 0.0 };
        }
    }
}

/// Adjoint of [`gradient`], accumulated into `out`.
fn gradient_adjoint_add(gx: &[f64], gy: &[f64], n: usize, c: f64, out: &mut [f64]) {
    for r in 0..n {
        for col in 0..n {
            let i = r * n + col;
            let mut v = 0.0;
            if col + 1 < n {
                v -= gx[i];
            }
            if col > 0 {
                v += gx[i - 1];
            }
            if r + 1 < n {
                v -= gy[i];
            }
            if r > 0 {
                v += gy[i - n];
            }
            out[i] += c * v;
        }
    }
}

/// Result of a TV solve.
#[derive(Debug, Clone)]
pub struct TvOutcome {
    pub image: Image,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration when tracking was requested.
    pub objective: Vec<f64>,
}

/// Chambolle–Pock solver bound to one operator.
#[derive(Debug)]
pub struct TvSolver<'a> {
    op: &'a RayTransform,
    config: TVConfig,
    scale: f64,
    tau: f64,
    sigma: f64,
}

impl<'a> TvSolver<'a> {
    /// Validates `lambda > 0` and `tau * sigma * L^2 <= 1`, with `L` the norm
    /// of the stacked operator from 50 power iterations.
    pub fn new(op: &'a RayTransform, config: TVConfig) -> Result<Self> {
        if !(config.lambda > 0.0 && config.lambda.is_finite()) {
            return Err(Error::Contract(format!("TV weight must be positive, got {}", config.lambda)));
        }
        if config.max_iterations == 0 {
            return Err(Error::Contract("TV needs at least one iteration".into()));
        }
        let la = op.norm_estimate(50);
        let scale = la / GRAD_NORM_SQ.sqrt();
        let l = stacked_norm(op, scale, 50);
        let tau = config.tau.unwrap_or(0.99 / l);
        let sigma = config.sigma.unwrap_or(0.99 / l);
        if !(tau > 0.0 && sigma > 0.0) || tau * sigma * l * l > 1.0 {
            return Err(Error::Contract(format!(
                "step sizes tau={tau:e}, sigma={sigma:e} violate tau*sigma*L^2 <= 1 for L={l:e}"
            )));
        }
        Ok(TvSolver {
            op,
            config,
            scale,
            tau,
            sigma,
        })
    }

    pub fn steps(&self) -> (f64, f64) {
        (self.tau, self.sigma)
    }

    pub fn solve(&self, y: &Sinogram, init: &Image) -> Result<TvOutcome> {
        let g = self.op.geometry();
        y.check_geometry(g, "tv_reconstruct")?;
        init.check_size(g.image_size, "tv_reconstruct")?;
        let n = g.image_size;
        let (tau, sigma, c) = (self.tau, self.sigma, self.scale);
        let bound = self.config.lambda / c;
        let a = self.op.matrix();
        let at = self.op.transposed();

        let mut x: Vec<f64> = init.data().iter().map(|v| v.max(0.0)).collect();
        let mut xbar = x.clone();
        let mut p = vec![0.0; y.data().len()];
        let (mut qx, mut qy) = (vec![0.0; n * n], vec![0.0; n * n]);
        let mut ax = vec![0.0; p.len()];
        let (mut gx, mut gy) = (vec![0.0; n * n], vec![0.0; n * n]);
        let mut kt = vec![0.0; n * n];
        let mut objective = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..self.config.max_iterations {
            iterations += 1;
            a.apply(&xbar, &mut ax);
            for ((pi, &ai), &yi) in p.iter_mut().zip(&ax).zip(y.data()) {
                *pi = (*pi + sigma * (ai - yi)) / (1.0 + sigma);
            }
            gradient(&xbar, n, c, &mut gx, &mut gy);
            for (q, g) in qx.iter_mut().zip(&gx).chain(qy.iter_mut().zip(&gy)) {
                *q = (*q + sigma * g).clamp(-bound, bound);
            }
            at.apply(&p, &mut kt);
            gradient_adjoint_add(&qx, &qy, n, c, &mut kt);
            let (mut diff, mut norm) = (0.0, 0.0);
            for ((xi, xb), k) in x.iter_mut().zip(xbar.iter_mut()).zip(&kt) {
                let next = (*xi - tau * k).max(0.0);
                diff += (next - *xi).powi(2);
                norm += next * next;
                *xb = 2.0 * next - *xi;
                *xi = next;
            }
            if self.config.track_objective {
                let img = Image::from_vec(n, x.clone())?;
                objective.push(tv_objective(self.op, &img, y, self.config.lambda)?);
            }
            if diff.sqrt() < self.config.tolerance * norm.sqrt().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        Ok(TvOutcome {
            image: Image::from_vec(n, x)?,
            iterations,
            converged,
            objective,
        })
    }
}

/// Norm of `x -> (A x, c * grad x)` by power iteration.
fn stacked_norm(op: &RayTransform, c: f64, iterations: usize) -> f64 {
    let n = op.geometry().image_size;
    let mut x = vec![1.0 / n as f64; n * n];
    // Break the symmetry of the constant vector, which the gradient annihilates.
    for (i, v) in x.iter_mut().enumerate() {
        *v *= 1.0 + 0.1 * ((i * 7919) % 13) as f64 / 13.0;
    }
    let mut ax = vec![0.0; op.matrix().rows];
    let (mut gx, mut gy) = (vec![0.0; n * n], vec![0.0; n * n]);
    let mut z = vec![0.0; n * n];
    let mut norm_sq = 0.0;
    for _ in 0..iterations {
        op.matrix().apply(&x, &mut ax);
        op.transposed().apply(&ax, &mut z);
        gradient(&x, n, c, &mut gx, &mut gy);
        gradient_adjoint_add(&gx, &gy, n, c, &mut z);
        norm_sq = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_sq == 0.0 {
            return 0.0;
        }
        x.iter_mut().zip(&z).for_each(|(a, b)| *a = b / norm_sq);
    }
    norm_sq.sqrt()
}

/// TV reconstruction warm-started from FBP.
pub fn tv_reconstruct(y: &Sinogram, g: &Geometry, cfg: &TVConfig) -> Result<Image> {
    let op = RayTransform::new(g)?;
    tv_reconstruct_with(&op, y, cfg)
}

pub fn tv_reconstruct_with(op: &RayTransform, y: &Sinogram, cfg: &TVConfig) -> Result<Image> {
    let init = fbp(y, op.geometry())?;
    Ok(TvSolver::new(op, cfg.clone())?.solve(y, &init)?.image)
}

/// Log-spaced candidates `10^lo ..= 10^hi` with `per_decade` steps per decade.
pub fn log_grid(lo: i32, hi: i32, per_decade: usize) -> Vec<f64> {
    let steps = ((hi - lo) as usize) * per_decade.max(1);
    (0..=steps)
        .map(|i| 10f64.powf(lo as f64 + i as f64 / per_decade.max(1) as f64))
        .collect()
}

/// Mean validation PSNR for every candidate, in candidate order.
pub fn lambda_sweep(
    op: &RayTransform,
    validation: &[(Sinogram, Image)],
    candidates: &[f64],
    base: &TVConfig,
) -> Result<Vec<(f64, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Contract("no TV weights to search".into()));
    }
    if validation.is_empty() {
        return Err(Error::Contract("empty validation set".into()));
    }
    let inits = validation
        .iter()
        .map(|(y, _)| fbp(y, op.geometry()))
        .collect::<Result<Vec<_>>>()?;
    candidates
        .iter()
        .map(|&lambda| {
            let solver = TvSolver::new(op, TVConfig { lambda, ..base.clone() })?;
            let mut total = 0.0;
            for ((y, truth), init) in validation.iter().zip(&inits) {
                total += psnr(&solver.solve(y, init)?.image, truth, 1.0)?;
            }
            Ok((lambda, total / validation.len() as f64))
        })
        .collect()
}

/// The candidate with the highest mean validation PSNR; ties go to the larger weight.
pub fn grid_search_lambda(
    op: &RayTransform,
    validation: &[(Sinogram, Image)],
    candidates: &[f64],
    base: &TVConfig,
) -> Result<f64> {
    let sweep = lambda_sweep(op, validation, candidates, base)?;
    Ok(best_of_sweep(&sweep))
}

/// Arg-max of a `(lambda, psnr)` sweep, preferring larger `lambda` on ties.
pub fn best_of_sweep(sweep: &[(f64, f64)]) -> f64 {
    sweep
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (l, p)| match best {
            Some((bl, bp)) if bp > p || (bp == p && bl > l) => Some((bl, bp)),
            _ => Some((l, p)),
        })
        .map(|(l, _)| l)
        .expect("nonempty sweep")
}
