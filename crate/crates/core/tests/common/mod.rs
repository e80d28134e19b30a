//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bdgd_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Relative discrepancy `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.norm().max(floor)
}

/// Builds a scalar loss from leaf handles.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Gradient from the tape and by central differences of every input.
pub fn tape_and_fd(inputs: &[Tensor], f: &LossFn, h: f64) -> Vec<(Tensor, Tensor)> {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar root");
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            let mut fd = Tensor::zeros(x.shape());
            for i in 0..x.len() {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += h;
                let up = eval(&xs);
                xs[k].data_mut()[i] -= 2.0 * h;
                let down = eval(&xs);
                fd.data_mut()[i] = (up - down) / (2.0 * h);
            }
            (analytic, fd)
        })
        .collect()
}

/// Largest relative gradient error over all inputs.
pub fn max_grad_error(inputs: &[Tensor], f: &LossFn) -> f64 {
    tape_and_fd(inputs, f, 1e-6)
        .iter()
        .map(|(a, fd)| rel_err(a, fd, 1e-8))
        .fold(0.0, f64::max)
}

/// `sum(w * y)` with a fixed random weight, so every output entry matters.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Every differentiable tape operation with its largest relative gradient
/// error against central differences.
pub fn autodiff_op_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let a = uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut r);
    let b = uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut r);
    let pos = uniform(&[2, 3, 4, 4], 0.5, 3.0, &mut r);
    // Keep kink-free inputs away from 0 for relu and from the clamp bounds.
    let away = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let s = uniform(&[1], -1.0, 1.0, &mut r);
    let k = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let bias = uniform(&[4], -1.0, 1.0, &mut r);
    let ws = |t: &mut Tape, y: Var| weighted_sum(t, y, 5);

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut check = |name: &'static str, xs: &[Tensor], f: &LossFn| out.push((name, max_grad_error(xs, f)));
    check("add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("add_broadcast", &[a.clone(), s.clone()], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("sub_broadcast", &[s.clone(), a.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("mul_broadcast", &[a.clone(), s.clone()], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("div", &[a.clone(), pos.clone()], &|t, v| {
        let y = t.div(v[0], v[1]).unwrap();
        ws(t, y)
    });
    check("div_broadcast", &[pos.clone(), Tensor::new(&[1], vec![1.7]).unwrap()], &|t, v| {
        let y = t.div(v[1], v[0]).unwrap();
        ws(t, y)
    });
    check("exp", std::slice::from_ref(&a), &|t, v| {
        let y = t.exp(v[0]);
        ws(t, y)
    });
    check("log", std::slice::from_ref(&pos), &|t, v| {
        let y = t.log(v[0]).unwrap();
        ws(t, y)
    });
    check("softplus", std::slice::from_ref(&a), &|t, v| {
        let y = t.softplus(v[0]);
        ws(t, y)
    });
    check("square", std::slice::from_ref(&a), &|t, v| {
        let y = t.square(v[0]);
        ws(t, y)
    });
    check("relu", std::slice::from_ref(&away), &|t, v| {
        let y = t.relu(v[0]);
        ws(t, y)
    });
    check("clamp", std::slice::from_ref(&away), &|t, v| {
        let y = t.clamp(v[0], -1.05, 1.05);
        ws(t, y)
    });
    check("scale", std::slice::from_ref(&a), &|t, v| {
        let y = t.scale(v[0], -2.5);
        ws(t, y)
    });
    check("shift", std::slice::from_ref(&a), &|t, v| {
        let y = t.shift(v[0], 0.7);
        ws(t, y)
    });
    check("sum", std::slice::from_ref(&a), &|t, v| {
        let y = t.sum(v[0]);
        t.square(y)
    });
    check("mean", std::slice::from_ref(&a), &|t, v| {
        let y = t.mean(v[0]);
        t.square(y)
    });
    check("sum_per_sample", std::slice::from_ref(&a), &|t, v| {
        let y = t.sum_per_sample(v[0]).unwrap();
        ws(t, y)
    });
    check("conv2d", &[a.clone(), k.clone(), bias.clone()], &|t, v| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        ws(t, y)
    });
    out
}

use bdgd_core::phantoms::random_ellipse_phantom;
use bdgd_core::tomo::{add_noise, fbp, Geometry, RayTransform};
use bdgd_core::training::BlockDataset;

/// `count` noisy random-ellipse measurements with FBP initial iterates.
pub fn ellipse_problem(size: usize, angles: usize, count: usize, seed: u64) -> (RayTransform, BlockDataset) {
    let g = Geometry::sparse_view(size, angles).unwrap();
    let op = RayTransform::new(&g).unwrap();
    let (mut t, mut x0, mut ys) = (vec![], vec![], vec![]);
    for i in 0..count as u64 {
        let x = random_ellipse_phantom(seed * 1000 + i, size).unwrap();
        let y = add_noise(&op.forward(&x).unwrap(), 0.01, seed * 1000 + 500 + i);
        x0.push(fbp(&y, &g).unwrap());
        t.push(x);
        ys.push(y);
    }
    (op, BlockDataset::new(t, x0, ys).unwrap())
}

use bdgd_core::cascade::{Arch, Block, Cascade, Mode};
use bdgd_core::rng::stream_rng;
use bdgd_core::training::{block_elbo, block_elbo_on_tape, Batch};
use bdgd_core::Image;

pub fn full_batch(block_data: &BlockDataset, cascade: &Cascade, op: &bdgd_core::tomo::RayTransform) -> Batch {
    let grads: Vec<Image> = block_data
        .iterates
        .iter()
        .zip(&block_data.sinograms)
        .map(|(x, y)| bdgd_core::tomo::data_fidelity_gradient(op, x, y).unwrap())
        .collect();
    let g: Vec<&Image> = grads.iter().collect();
    let x: Vec<&Image> = block_data.iterates.iter().collect();
    let t: Vec<&Image> = block_data.targets.iter().collect();
    Batch {
        input: bdgd_core::cascade::block_input(&g, &x, cascade.grad_scale).unwrap(),
        iterate: bdgd_core::cascade::stack_images(&x).unwrap(),
        target: bdgd_core::cascade::stack_images(&t).unwrap(),
    }
}

pub fn minimal_block(mode: Mode, seed: u64) -> Block {
    Block::init(1, &Arch::minimal(), mode, &mut stream_rng(seed, 0, 0))
}

/// Gradient of the block ELBO against central differences, for every
/// trainable tensor of a minimal block.
pub fn elbo_gradient_error(mode: Mode) -> f64 {
    let (op, data) = ellipse_problem(16, 8, 3, 10);
    let cascade = Cascade::new(mode, Arch::minimal(), op.geometry().clone(), Cascade::landweber_scale(&op));
    let batch = full_batch(&data, &cascade, &op);
    let mut block = minimal_block(mode, 10);
    if let Some(s) = &mut block.log_sigma2 {
        *s = Tensor::scalar(-3.0);
    }
    let noise = block.draw_noise(&mut stream_rng(2, 0, 0));
    let mut tape = Tape::new();
    let vars = block.bind(&mut tape, true);
    let terms = block_elbo_on_tape(&mut tape, &block, &vars, &batch, &noise, 3).unwrap();
    let mut grads = tape.backward(terms.loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .trainable()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (p, g) in analytic.iter().enumerate() {
        let mut fd = Tensor::zeros(g.shape());
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut b = block.clone();
                b.trainable_mut()[p].data_mut()[i] += delta;
                block_elbo(&b, &batch, &noise, 3).unwrap().loss
            };
            fd.data_mut()[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        worst = worst.max(rel_err(g, &fd, 1e-6));
    }
    worst
}

