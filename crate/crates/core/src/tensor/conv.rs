//! Same-padded 2D cross-correlation lowered to GEMM.
//!
//! Each sample is copied into a zero-padded buffer whose rows are `W + kw - 1`
//! wide. In that layout a kernel tap `(i, j)` is a constant offset
//! `i * Wp + j`, so the convolution becomes `kh * kw` small GEMMs over
//! shifted views, computed in the padded row width and cropped afterwards.
//! No im2col buffer is materialized.

use super::Tensor;
use crate::error::{Error, Result};

/// Shape bookkeeping shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    fn check(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 4 {
            return Err(Error::dim("conv2d input rank", &[4], &[is.len()]));
        }
        if ks.len() != 4 {
            return Err(Error::dim("conv2d kernel rank", &[4], &[ks.len()]));
        }
        if ks[1] != is[1] {
            return Err(Error::dim("conv2d channels", &[is[1]], &[ks[1]]));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::dim("conv2d kernel must be odd", &[ks[2] | 1, ks[3] | 1], &ks[2..]));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::dim("conv2d bias", &[ks[0]], bias.shape()));
        }
        Ok(ConvDims {
            n: is[0],
            c: is[1],
            h: is[2],
            w: is[3],
            f: ks[0],
            kh: ks[2],
            kw: ks[3],
        })
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Padded row width.
    fn wp(&self) -> usize {
        self.w + self.kw - 1
    }

    /// Output span in padded row width.
    fn span(&self) -> usize {
        self.h * self.wp()
    }

    /// Stride between padded channel planes; the tail slack keeps the last
    /// shifted view in bounds.
    fn padded_plane(&self) -> usize {
        (self.h + self.kh - 1) * self.wp() + self.kw
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        i * self.wp() + j
    }
}

/// Copy `C` channels of one sample into the padded layout.
fn pad_into(src: &[f64], d: &ConvDims, channels: usize, dst: &mut [f64]) {
    let (ph, pw, wp, pp) = (d.kh / 2, d.kw / 2, d.wp(), d.padded_plane());
    dst.fill(0.0);
    for c in 0..channels {
        for y in 0..d.h {
            let s = &src[(c * d.h + y) * d.w..][..d.w];
            dst[c * pp + (y + ph) * wp + pw..][..d.w].copy_from_slice(s);
        }
    }
}

/// Copy `rows` planes of padded-width output `[rows, H * Wp]` into `[rows, H, W]`.
fn crop_into(src: &[f64], d: &ConvDims, rows: usize, dst: &mut [f64]) {
    let (wp, span) = (d.wp(), d.span());
    for r in 0..rows {
        for y in 0..d.h {
            dst[(r * d.h + y) * d.w..][..d.w].copy_from_slice(&src[r * span + y * wp..][..d.w]);
        }
    }
}

/// Lay out `[rows, H, W]` in padded row width with zero slack columns.
fn widen_into(src: &[f64], d: &ConvDims, rows: usize, dst: &mut [f64]) {
    let (wp, span) = (d.wp(), d.span());
    dst.fill(0.0);
    for r in 0..rows {
        for y in 0..d.h {
            dst[r * span + y * wp..][..d.w].copy_from_slice(&src[(r * d.h + y) * d.w..][..d.w]);
        }
    }
}

/// Matrix operand: base offset into a slice plus row and column strides.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rs: isize,
    cs: isize,
}

/// `c = a * b + beta * c` for an `m x k` times `k x n` product.
fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64], offset: usize, (rsc, csc): (isize, isize)) {
    let extent = |v: &View, rows: usize, cols: usize| {
        v.offset as isize + (rows as isize - 1) * v.rs + (cols as isize - 1) * v.cs
    };
    assert!((extent(&a, m, k) as usize) < a.data.len());
    assert!((extent(&b, k, n) as usize) < b.data.len());
    assert!(((offset as isize + (m as isize - 1) * rsc + (n as isize - 1) * csc) as usize) < c.len());
    // SAFETY: the asserts above bound every addressed element of a, b and c;
    // c is a distinct mutable slice so it cannot alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr().add(offset),
            rsc,
            csc,
        );
    }
}

/// Cross-correlate `input [N,C,H,W]` with `kernel [F,C,kh,kw]`, zero same-padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = ConvDims::check(input, kernel, bias)?;
    let (plane, span, pp, taps) = (d.plane(), d.span(), d.padded_plane(), d.taps());
    let mut out = vec![0.0; d.n * d.f * plane];
    let mut padded = vec![0.0; d.c * pp];
    let mut acc = vec![0.0; d.f * span];
    for s in 0..d.n {
        pad_into(&input.data()[s * d.c * plane..], &d, d.c, &mut padded);
        for (f, row) in acc.chunks_exact_mut(span).enumerate() {
            row.fill(bias.data()[f]);
        }
        for i in 0..d.kh {
            for j in 0..d.kw {
                // acc[F, span] += K[:, :, i, j] [F, C] * padded[C, span] shifted
                gemm(
                    d.f,
                    d.c,
                    span,
                    View { data: kernel.data(), offset: i * d.kw + j, rs: (d.c * taps) as isize, cs: taps as isize },
                    View { data: &padded, offset: d.offset(i, j), rs: pp as isize, cs: 1 },
                    1.0,
                    &mut acc,
                    0,
                    (span as isize, 1),
                );
            }
        }
        crop_into(&acc, &d, d.f, &mut out[s * d.f * plane..]);
    }
    Tensor::new(&[d.n, d.f, d.h, d.w], out)
}

/// Gradients of a conv2d output with respect to its operands.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let d = ConvDims::check(input, kernel, bias)?;
    if grad_out.shape() != [d.n, d.f, d.h, d.w] {
        return Err(Error::dim("conv2d grad", &[d.n, d.f, d.h, d.w], grad_out.shape()));
    }
    let (plane, span, pp, taps) = (d.plane(), d.span(), d.padded_plane(), d.taps());
    let (ph, pw, wp) = (d.kh / 2, d.kw / 2, d.wp());
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; d.f];
    let mut di = need_input.then(|| vec![0.0; input.len()]);
    let mut padded = vec![0.0; d.c * pp];
    let mut dpadded = vec![0.0; if need_input { d.c * pp } else { 0 }];
    let mut g = vec![0.0; d.f * span];
    for s in 0..d.n {
        let gs = &grad_out.data()[s * d.f * plane..(s + 1) * d.f * plane];
        for (f, row) in gs.chunks_exact(plane).enumerate() {
            db[f] += row.iter().sum::<f64>();
        }
        widen_into(gs, &d, d.f, &mut g);
        pad_into(&input.data()[s * d.c * plane..], &d, d.c, &mut padded);
        if need_input {
            dpadded.fill(0.0);
        }
        for i in 0..d.kh {
            for j in 0..d.kw {
                let tap = i * d.kw + j;
                // dK[:, :, i, j] [F, C] += G[F, span] * shifted[C, span]^T
                gemm(
                    d.f,
                    span,
                    d.c,
                    View { data: &g, offset: 0, rs: span as isize, cs: 1 },
                    View { data: &padded, offset: d.offset(i, j), rs: 1, cs: pp as isize },
                    1.0,
                    &mut dk,
                    tap,
                    ((d.c * taps) as isize, taps as isize),
                );
                if need_input {
                    // shifted dpadded[C, span] += K[:, :, i, j]^T [C, F] * G[F, span]
                    gemm(
                        d.c,
                        d.f,
                        span,
                        View { data: kernel.data(), offset: tap, rs: taps as isize, cs: (d.c * taps) as isize },
                        View { data: &g, offset: 0, rs: span as isize, cs: 1 },
                        1.0,
                        &mut dpadded,
                        d.offset(i, j),
                        (pp as isize, 1),
                    );
                }
            }
        }
        if let Some(di) = di.as_mut() {
            let dst = &mut di[s * d.c * plane..(s + 1) * d.c * plane];
            for c in 0..d.c {
                for y in 0..d.h {
                    dst[(c * d.h + y) * d.w..][..d.w].copy_from_slice(&dpadded[c * pp + (y + ph) * wp + pw..][..d.w]);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: di.map(|v| Tensor::new(input.shape(), v)).transpose()?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::new(bias.shape(), db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let mut out = Tensor::zeros(&[n, f, h, w]);
        for s in 0..n {
            for o in 0..f {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = bias.data()[o];
                        for ch in 0..c {
                            for i in 0..kh as isize {
                                for j in 0..kw as isize {
                                    let (sy, sx) = (y + i - kh as isize / 2, x + j - kw as isize / 2);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let iv = input.data()
                                        [((s * c + ch) * h + sy as usize) * w + sx as usize];
                                    let kv = kernel.data()
                                        [((o * c + ch) * kh + i as usize) * kw + j as usize];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out.data_mut()[((s * f + o) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = conv2d(&Tensor::zeros(&[1, 1, 3, 3]), &random(&[1, 1, 3, 3], &mut rng), &Tensor::zeros(&[1]))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 1, 4, 6], &mut rng);
        let out = conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let k = random(&[1, 1, 3, 3], &mut rng);
        let b = random(&[1], &mut rng);
        assert!(conv2d(&x, &k, &b).unwrap().max_abs_diff(&naive(&x, &k, &b)) < 1e-12);

        let x = random(&[2, 3, 6, 5], &mut rng);
        let k = random(&[4, 3, 5, 3], &mut rng);
        let b = random(&[4], &mut rng);
        assert!(conv2d(&x, &k, &b).unwrap().max_abs_diff(&naive(&x, &k, &b)) < 1e-12);
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x and k, so its gradients are exact adjoints.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 2, 5, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[3]);
        let g = random(&[2, 3, 5, 4], &mut rng);
        let grads = conv2d_backward(&x, &k, &zero, &g, true).unwrap();
        let lhs = conv2d(&x, &k, &zero).unwrap().dot(&g);
        assert!((lhs - grads.input.unwrap().dot(&x)).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - grads.kernel.dot(&k)).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
