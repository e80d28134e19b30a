//! Greedy block-wise variational training.
//!
//! Block `k` is trained to completion with blocks `1..k` frozen. Its loss is
//! the negative ELBO `(N/|B|) * sum_i NLL_i + KL`, estimated with one
//! reparameterized weight draw per mini-batch. When a block converges a single
//! posterior draw pushes every training iterate forward to `x_k`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::cascade::{block_input, stack_images, Arch, Block, BlockNoise, Cascade, Mode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{purpose, stream_rng};
use crate::tensor::{Tape, Tensor, Var};
use crate::tomo::{data_fidelity_gradient, RayTransform, Sinogram};

/// File name of the rolling checkpoint inside a training directory.
pub const CHECKPOINT_FILE: &str = "cascade.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub arch: Arch,
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: Mode, blocks: usize, seed: u64) -> Self {
        TrainConfig {
            mode,
            arch: Arch::standard(),
            blocks,
            epochs: 150,
            batch_size: 16,
            learning_rate: 1e-3,
            seed,
        }
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("a cascade needs at least one block".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={dataset_len}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Ground truths, current iterates and measurements of the training set.
#[derive(Debug, Clone)]
pub struct BlockDataset {
    pub targets: Vec<Image>,
    pub iterates: Vec<Image>,
    pub sinograms: Vec<Sinogram>,
}

impl BlockDataset {
    pub fn new(targets: Vec<Image>, initial: Vec<Image>, sinograms: Vec<Sinogram>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        if targets.len() != initial.len() || targets.len() != sinograms.len() {
            return Err(Error::Contract(format!(
                "{} targets, {} iterates, {} sinograms",
                targets.len(),
                initial.len(),
                sinograms.len()
            )));
        }
        Ok(BlockDataset {
            targets,
            iterates: initial,
            sinograms,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Mean over samples and pixels of the squared iterate error.
    pub fn mean_squared_residual(&self) -> f64 {
        let total: f64 = self
            .targets
            .iter()
            .zip(&self.iterates)
            .map(|(t, x)| t.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        total / (self.len() * self.targets[0].data().len()) as f64
    }

    /// Advance every iterate through `block` of `cascade` with one weight draw.
    pub fn propagate(&mut self, cascade: &Cascade, block: usize, op: &RayTransform, noise: &BlockNoise) -> Result<()> {
        let ys: Vec<&Sinogram> = self.sinograms.iter().collect();
        let (next, _) = cascade.apply_block(block, op, &ys, &self.iterates, noise)?;
        self.iterates = next;
        Ok(())
    }
}

/// `1/2 * sum (target - pred)^2 / sigma^2 + log sigma^2` over pixels.
pub fn nll_homoscedastic(pred: &Image, target: &Image, log_sigma2: f64) -> Result<f64> {
    target.check_size(pred.size(), "nll_homoscedastic")?;
    let inv = (-log_sigma2).exp();
    Ok(0.5
        * pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (t - p).powi(2) * inv + log_sigma2)
            .sum::<f64>())
}

/// Batch mean of `sum (target - pred)^2 / sigma^2 + sum log sigma^2`.
pub fn nll_heteroscedastic(preds: &[Image], targets: &[Image], logvars: &[Image]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() || preds.len() != logvars.len() {
        return Err(Error::Contract("nll_heteroscedastic needs equally many nonempty inputs".into()));
    }
    let mut total = 0.0;
    for ((p, t), lv) in preds.iter().zip(targets).zip(logvars) {
        t.check_size(p.size(), "nll_heteroscedastic")?;
        lv.check_size(p.size(), "nll_heteroscedastic")?;
        total += p
            .data()
            .iter()
            .zip(t.data())
            .zip(lv.data())
            .map(|((p, t), l)| (t - p).powi(2) * (-l).exp() + l)
            .sum::<f64>();
    }
    Ok(total / preds.len() as f64)
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// `(N/|B|) * sum_i NLL_i`.
    pub nll: Var,
    pub kl: Option<Var>,
    pub loss: Var,
}

/// One prepared mini-batch: `[B, 2, n, n]` inputs, `[B, 1, n, n]` iterates and targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub iterate: Tensor,
    pub target: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Record the negative ELBO of `block` on `batch` for a training set of
/// `n_total` samples.
pub fn block_elbo_on_tape(
    tape: &mut Tape,
    block: &Block,
    vars: &crate::cascade::BlockVars,
    batch: &Batch,
    noise: &BlockNoise,
    n_total: usize,
) -> Result<ElboTerms> {
    let input = tape.constant(batch.input.clone());
    let x_prev = tape.constant(batch.iterate.clone());
    let target = tape.constant(batch.target.clone());
    let out = block.forward_on_tape(tape, vars, input, x_prev, noise)?;
    let r = tape.sub(out.next, target)?;
    let r2 = tape.square(r);
    let neg = tape.scale(out.logvar, -1.0);
    let precision = tape.exp(neg);
    let weighted = tape.mul(r2, precision)?;
    let mahalanobis = tape.sum(weighted);
    let sum_nll = if tape.value(out.logvar).len() == 1 {
        let pixels = batch.target.len() as f64;
        let logdet = tape.scale(out.logvar, pixels);
        let s = tape.add(mahalanobis, logdet)?;
        tape.scale(s, 0.5)
    } else {
        let logdet = tape.sum(out.logvar);
        tape.add(mahalanobis, logdet)?
    };
    let nll = tape.scale(sum_nll, n_total as f64 / batch.len() as f64);
    let kl = block.kl_on_tape(tape, vars)?;
    let loss = match kl {
        Some(kl) => tape.add(nll, kl)?,
        None => nll,
    };
    Ok(ElboTerms { nll, kl, loss })
}

/// Values of the negative ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub nll: f64,
    pub kl: f64,
    pub loss: f64,
}

/// Evaluate the negative ELBO without keeping gradients.
pub fn block_elbo(block: &Block, batch: &Batch, noise: &BlockNoise, n_total: usize) -> Result<ElboValue> {
    let mut tape = Tape::new();
    let vars = block.bind(&mut tape, false);
    let t = block_elbo_on_tape(&mut tape, block, &vars, batch, noise, n_total)?;
    Ok(ElboValue {
        nll: tape.value(t.nll).item(),
        kl: t.kl.map_or(0.0, |k| tape.value(k).item()),
        loss: tape.value(t.loss).item(),
    })
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != g.len() {
                return Err(Error::dim("Adam::step", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub block: usize,
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub loss: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "block {} epoch {} nll={:.6e} kl={:.6e} loss={:.6e}",
            self.block, self.epoch, self.nll, self.kl, self.loss
        )
    }
}

/// Precomputed per-sample block inputs for the current iterates.
struct BlockInputs {
    inputs: Vec<Vec<f64>>,
    n: usize,
}

impl BlockInputs {
    fn new(op: &RayTransform, data: &BlockDataset, grad_scale: f64) -> Result<Self> {
        let n = data.targets[0].size();
        let inputs = data
            .iterates
            .iter()
            .zip(&data.sinograms)
            .map(|(x, y)| {
                let g = data_fidelity_gradient(op, x, y)?;
                Ok(block_input(&[&g], &[x], grad_scale)?.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockInputs { inputs, n })
    }

    fn batch(&self, data: &BlockDataset, idx: &[usize]) -> Result<Batch> {
        let n = self.n;
        let mut input = Vec::with_capacity(idx.len() * 2 * n * n);
        for &i in idx {
            input.extend_from_slice(&self.inputs[i]);
        }
        let iterates: Vec<&Image> = idx.iter().map(|&i| &data.iterates[i]).collect();
        let targets: Vec<&Image> = idx.iter().map(|&i| &data.targets[i]).collect();
        Ok(Batch {
            input: Tensor::new(&[idx.len(), 2, n, n], input)?,
            iterate: stack_images(&iterates)?,
            target: stack_images(&targets)?,
        })
    }
}

/// Start the block's noise model at the current residual level: `log sigma^2`
/// (or the variance head's output bias) is set to the log mean squared error
/// of the incoming iterates.
fn init_noise_level(block: &mut Block, data: &BlockDataset) {
    let level = data.mean_squared_residual().max(1e-8).ln();
    if let Some(s) = &mut block.log_sigma2 {
        *s = Tensor::scalar(level);
    }
    if let Some(h) = &mut block.variance {
        h.out.bias = Tensor::full(h.out.bias.shape(), level);
    }
}

/// The untrained block `index` as training starts it: seeded initialization
/// with the noise level matched to the current iterates.
pub fn initial_block(index: usize, cascade: &Cascade, data: &BlockDataset, seed: u64) -> Block {
    let mut block = Block::init(index, &cascade.arch, cascade.mode, &mut stream_rng(seed, index as u64, purpose::INIT));
    init_noise_level(&mut block, data);
    block
}

/// Train block `index` (1-based) on the current iterates, append it to the
/// cascade and advance the iterates. Returns per-epoch statistics.
pub fn train_block(
    index: usize,
    cascade: &mut Cascade,
    op: &RayTransform,
    data: &mut BlockDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    config.validate(data.len())?;
    if index != cascade.len() + 1 {
        return Err(Error::Contract(format!(
            "block {index} cannot follow a cascade of {} blocks",
            cascade.len()
        )));
    }
    let seed = config.seed;
    let mut block = initial_block(index, cascade, data, seed);

    let inputs = BlockInputs::new(op, data, cascade.grad_scale)?;
    let mut shuffle = stream_rng(seed, index as u64, purpose::SHUFFLE);
    let mut noise_rng = stream_rng(seed, index as u64, purpose::TRAIN_NOISE);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let (mut nll, mut kl, mut loss, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let batch = inputs.batch(data, idx)?;
            let noise = block.draw_noise(&mut noise_rng);
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape, true);
            let terms = block_elbo_on_tape(&mut tape, &block, &vars, &batch, &noise, data.len())?;
            let value = tape.value(terms.loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    block: index,
                    epoch,
                    detail: format!("loss became {value}"),
                });
            }
            nll += tape.value(terms.nll).item();
            kl += terms.kl.map_or(0.0, |k| tape.value(k).item());
            loss += value;
            batches += 1;
            let mut grads = tape.backward(terms.loss)?;
            let grads = vars
                .trainable()
                .into_iter()
                .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                .collect::<Vec<_>>();
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    block: index,
                    epoch,
                    detail: format!("non-finite gradient for parameter {bad}"),
                });
            }
            adam.step(block.trainable_mut(), &grads)?;
        }
        let b = batches as f64;
        let stats = EpochStats {
            block: index,
            epoch,
            nll: nll / b,
            kl: kl / b,
            loss: loss / b,
        };
        log::info!("{}", stats.log_line());
        on_epoch(&stats);
        history.push(stats);
    }

    cascade.blocks.push(block);
    let noise = propagation_noise(cascade, index, seed);
    data.propagate(cascade, index - 1, op, &noise)?;
    Ok(history)
}

/// The single posterior draw used to advance iterates through block `index`.
pub fn propagation_noise(cascade: &Cascade, index: usize, seed: u64) -> BlockNoise {
    cascade.blocks[index - 1].draw_noise(&mut stream_rng(seed, index as u64, purpose::PROPAGATE))
}

/// Outcome of [`train_cascade`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub cascade: Cascade,
    pub history: Vec<EpochStats>,
    /// Blocks restored from a checkpoint instead of trained.
    pub resumed_blocks: usize,
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Train `config.blocks` blocks greedily. With a checkpoint directory the
/// cascade is saved after every block, and an existing checkpoint there is
/// resumed: its blocks are kept and the iterates are replayed through them
/// with the same propagation draws as the original run.
pub fn train_cascade(
    op: &RayTransform,
    data: &mut BlockDataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    config.validate(data.len())?;
    let geometry = op.geometry().clone();
    let mut cascade = match checkpoint_dir.map(checkpoint_path).filter(|p| p.exists()) {
        Some(path) => {
            let c = Cascade::load(&path)?;
            if c.mode != config.mode || c.arch != config.arch || c.geometry != geometry {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different mode, architecture or geometry",
                    path.display()
                )));
            }
            if c.len() > config.blocks {
                return Err(Error::Config(format!(
                    "checkpoint {} holds {} blocks but {} were requested",
                    path.display(),
                    c.len(),
                    config.blocks
                )));
            }
            c
        }
        None => Cascade::new(config.mode, config.arch.clone(), geometry, Cascade::landweber_scale(op)),
    };
    let resumed_blocks = cascade.len();
    for k in 1..=resumed_blocks {
        let noise = propagation_noise(&cascade, k, config.seed);
        data.propagate(&cascade, k - 1, op, &noise)?;
    }
    let mut history = Vec::new();
    for k in resumed_blocks + 1..=config.blocks {
        history.extend(train_block(k, &mut cascade, op, data, config, &mut on_epoch)?);
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            cascade.save(checkpoint_path(dir))?;
        }
    }
    Ok(TrainReport {
        cascade,
        history,
        resumed_blocks,
    })
}
