mod common;

use bdgd_core::tensor::{Tape, Tensor, Var};
use common::*;

#[test]
fn every_op_matches_central_differences() {
    for (name, err) in autodiff_op_errors() {
        assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn three_layer_conv_net_matches_central_differences() {
    let mut r = rng(21);
    let x = uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r);
    let target = uniform(&[2, 1, 6, 6], -1.0, 1.0, &mut r);
    let params = vec![
        uniform(&[4, 2, 5, 5], -0.5, 0.5, &mut r),
        uniform(&[4], -0.1, 0.1, &mut r),
        uniform(&[4, 4, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[4], -0.1, 0.1, &mut r),
        uniform(&[1, 4, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[1], -0.1, 0.1, &mut r),
    ];
    let net = |t: &mut Tape, v: &[Var]| {
        let input = t.constant(x.clone());
        let tgt = t.constant(target.clone());
        let h = t.conv2d(input, v[0], v[1]).unwrap();
        let h = t.softplus(h);
        let h = t.conv2d(h, v[2], v[3]).unwrap();
        let h = t.softplus(h);
        let y = t.conv2d(h, v[4], v[5]).unwrap();
        let d = t.sub(y, tgt).unwrap();
        let d2 = t.square(d);
        t.mean(d2)
    };
    let err = max_grad_error(&params, &net);
    assert!(err < 1e-4, "relative gradient error {err:e}");
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x * x + x uses x three times.
    let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut t = Tape::new();
    let v = t.param(x.clone());
    let sq = t.mul(v, v).unwrap();
    let y = t.add(sq, v).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v + 1.0).collect();
    assert_eq!(g.get(v).unwrap().data(), expect.as_slice());
}
