use super::{conv, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Softplus,
    Square,
    Relu,
    Clamp(f64, f64),
    Scale(f64),
    Shift(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    /// Per-sample sum over all trailing axes: `[N, ...] -> [N]`.
    SumPerSample(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Node ids are assigned in creation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is held fixed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = match (ta.len(), tb.len()) {
            _ if ta.shape() == tb.shape() => ta.shape().to_vec(),
            (_, 1) => ta.shape().to_vec(),
            (1, _) => tb.shape().to_vec(),
            _ => return Err(Error::dim("elementwise operands", ta.shape(), tb.shape())),
        };
        let len: usize = shape.iter().product();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let (da, db) = (ta.data(), tb.data());
        let data = (0..len)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Softplus => Box::new(softplus),
            Unary::Square => Box::new(|x| x * x),
            Unary::Relu => Box::new(|x: f64| if x > 0.0 { x } else { 0.0 }),
            Unary::Clamp(lo, hi) => Box::new(move |x: f64| x.clamp(lo, hi)),
            Unary::Scale(c) => Box::new(move |x| c * x),
            Unary::Shift(c) => Box::new(move |x| x + c),
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive argument {bad}"),
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// `max(0, x)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Shift(c), a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .first()
            .ok_or_else(|| Error::Contract("sum_per_sample on rank-0 tensor".into()))?;
        let stride = t.len() / n.max(1);
        let data = t.data().chunks(stride.max(1)).map(|c| c.iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n], data)?, Op::SumPerSample(a), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = conv::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {root_len} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
            match slot {
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                None => *slot = Some(delta),
            }
        }

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    let n = g.len();
                    let (mut ga, mut gb) = (vec![0.0; va.len()], vec![0.0; vb.len()]);
                    for i in 0..n {
                        let (x, y) = (va[i % va.len()], vb[i % vb.len()]);
                        let (dx, dy) = match kind {
                            Binary::Add => (1.0, 1.0),
                            Binary::Sub => (1.0, -1.0),
                            Binary::Mul => (y, x),
                            Binary::Div => (1.0 / y, -x / (y * y)),
                        };
                        ga[i % va.len()] += g[i] * dx;
                        gb[i % vb.len()] += g[i] * dy;
                    }
                    if self.rg(a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.rg(b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Unary(kind, a) => {
                    let x = self.value(a).data();
                    let y = node.value.data();
                    let d: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            gi * match kind {
                                Unary::Exp => y[i],
                                Unary::Log => 1.0 / x[i],
                                Unary::Softplus => sigmoid(x[i]),
                                Unary::Square => 2.0 * x[i],
                                Unary::Relu => (x[i] > 0.0) as u8 as f64,
                                Unary::Clamp(lo, hi) => (x[i] > lo && x[i] < hi) as u8 as f64,
                                Unary::Scale(c) => c,
                                Unary::Shift(_) => 1.0,
                            }
                        })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut grads[a.0], vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
                Op::SumPerSample(a) => {
                    let len = self.value(a).len();
                    let stride = len / g.len().max(1);
                    let d = (0..len).map(|i| g[i / stride]).collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let go = Tensor::new(node.value.shape(), g)?;
                    let cg = conv::conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        self.value(bias),
                        &go,
                        self.rg(input),
                    )?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads[input.0], gi.into_data());
                    }
                    if self.rg(kernel) {
                        accumulate(&mut grads[kernel.0], cg.kernel.into_data());
                    }
                    if self.rg(bias) {
                        accumulate(&mut grads[bias.0], cg.bias.into_data());
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(data) => Tensor::new(self.nodes[i].value.shape(), data).map(Some),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }
}
