//! Mean-field Gaussian weight posteriors.
//!
//! Each weight `d` carries `(mu_d, rho_d)` with `sigma_d = softplus(rho_d)`.
//! Samples are drawn by reparameterization, `w = mu + sigma * eps`, so the
//! loss stays differentiable in `mu` and `rho`. The prior on every block's
//! Bayesian weights is `N(0, I)`; earlier blocks enter the prior only through
//! their frozen posteriors, which cancel from the KL term of later blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{autodiff::softplus_scalar, Tape, Tensor, Var};

/// Initial posterior standard deviation.
pub const INITIAL_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGaussianLayer {
    pub mu: Tensor,
    pub rho: Tensor,
    /// Zero-variance (delta) posterior: sampling returns `mu` and the KL term
    /// is dropped. Used for the deterministic DGD ablation.
    pub deterministic: bool,
}

/// `rho` such that `softplus(rho) == sigma`.
pub fn rho_for_sigma(sigma: f64) -> f64 {
    sigma.exp_m1().ln()
}

impl MeanFieldGaussianLayer {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::dim("MeanFieldGaussianLayer", mu.shape(), rho.shape()));
        }
        Ok(MeanFieldGaussianLayer {
            mu,
            rho,
            deterministic: false,
        })
    }

    /// He-style means `N(0, 2 / fan_in)` and a small uniform `sigma`.
    pub fn init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
        let mu = Tensor::from_fn(shape, |_| normal.sample(rng));
        let rho = Tensor::full(shape, rho_for_sigma(INITIAL_SIGMA));
        MeanFieldGaussianLayer {
            mu,
            rho,
            deterministic: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor {
        if self.deterministic {
            return Tensor::zeros(self.mu.shape());
        }
        self.rho.map(softplus_scalar)
    }

    pub fn standard_noise(&self, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(self.mu.shape(), |_| StandardNormal.sample(rng))
    }

    /// `mu + softplus(rho) * noise`.
    pub fn sample_weights(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.mu.shape() {
            return Err(Error::dim("sample_weights", self.mu.shape(), noise.shape()));
        }
        if self.deterministic {
            return Ok(self.mu.clone());
        }
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(noise.data())
            .map(|((m, r), e)| m + softplus_scalar(*r) * e)
            .collect();
        Tensor::new(self.mu.shape(), data)
    }

    /// `KL(q || N(0, I)) = sum_d 0.5 (sigma^2 + mu^2 - 1 - log sigma^2)`.
    pub fn kl_to_prior(&self) -> f64 {
        if self.deterministic {
            return 0.0;
        }
        self.mu
            .data()
            .iter()
            .zip(self.rho.data())
            .map(|(m, r)| {
                let s = softplus_scalar(*r);
                0.5 * (s * s + m * m - 1.0) - s.ln()
            })
            .sum()
    }

    /// Record the reparameterized sample on a tape. `mu` and `rho` are the
    /// tape handles bound to this layer's parameters.
    pub fn sample_on_tape(&self, tape: &mut Tape, mu: Var, rho: Option<Var>, noise: &Tensor) -> Result<Var> {
        if noise.shape() != self.mu.shape() {
            return Err(Error::dim("sample_weights", self.mu.shape(), noise.shape()));
        }
        match rho {
            Some(rho) if !self.deterministic => {
                let sigma = tape.softplus(rho);
                let eps = tape.constant(noise.clone());
                let spread = tape.mul(sigma, eps)?;
                tape.add(mu, spread)
            }
            _ => Ok(mu),
        }
    }

    /// Closed-form KL on a tape; `None` for deterministic layers.
    pub fn kl_on_tape(&self, tape: &mut Tape, mu: Var, rho: Option<Var>) -> Result<Option<Var>> {
        let Some(rho) = rho.filter(|_| !self.deterministic) else {
            return Ok(None);
        };
        let sigma = tape.softplus(rho);
        let var = tape.square(sigma);
        let mu2 = tape.square(mu);
        let quad = tape.add(var, mu2)?;
        let quad = tape.shift(quad, -1.0);
        let half = tape.scale(quad, 0.5);
        let log_sigma = tape.log(sigma)?;
        let terms = tape.sub(half, log_sigma)?;
        Ok(Some(tape.sum(terms)))
    }
}

/// Prior of block `k` (1-based): the frozen posteriors of blocks `1..k`
/// composed with `N(0, I)` on the new weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSpec {
    pub block: usize,
}

impl PriorSpec {
    pub fn for_block(block: usize) -> Self {
        PriorSpec { block }
    }

    /// Blocks whose frozen posteriors the prior references.
    pub fn frozen_blocks(&self) -> std::ops::Range<usize> {
        1..self.block
    }

    /// KL contribution optimized while training this block. The frozen
    /// factors are shared by posterior and prior and cancel, leaving the
    /// standard-normal KL of the block's own layers.
    pub fn block_kl<'a>(&self, layers: impl IntoIterator<Item = &'a MeanFieldGaussianLayer>) -> f64 {
        layers.into_iter().map(|l| l.kl_to_prior()).sum()
    }
}
