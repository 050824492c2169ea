//! Forward and backward passes for the handful of layer types the micro
//! detector is built from. Everything is plain loops over `f64` tensors;
//! at desk scale that is fast enough and keeps gradients auditable
//! against finite differences.

use crate::tensor::Tensor;

#[inline]
fn widx(cin: usize, k: usize, o: usize, c: usize, ky: usize, kx: usize) -> usize {
    ((o * cin + c) * k + ky) * k + kx
}

/// 2D convolution with zero padding. `x`: Cin×H×W, `w`: Cout×Cin×K×K.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape(), [cout, cin, k, k]);
    debug_assert_eq!(b.shape(), [cout]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![cout, oh, ow]);
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[widx(cin, k, o, c, ky, kx)]
                                * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
                let idx = out.idx3(o, oy, ox);
                out.data_mut()[idx] = acc;
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: accumulates into `d_w`/`d_b`, returns `d_x`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    d_out: &Tensor,
    d_w: &mut Tensor,
    d_b: &mut Tensor,
) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (d_out.shape()[1], d_out.shape()[2]);
    let mut d_x = Tensor::zeros_like(x);
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out.at3(o, oy, ox);
                if g == 0.0 {
                    continue;
                }
                d_b.data_mut()[o] += g;
                for c in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let (iyu, ixu) = (iy as usize, ix as usize);
                            d_w.data_mut()[widx(cin, k, o, c, ky, kx)] += g * x.at3(c, iyu, ixu);
                            let xi = d_x.idx3(c, iyu, ixu);
                            d_x.data_mut()[xi] += g * w.data()[widx(cin, k, o, c, ky, kx)];
                        }
                    }
                }
            }
        }
    }
    d_x
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// `d_x = d_y ⊙ [pre > 0]`, using the pre-activation values.
pub fn relu_backward(pre: &Tensor, d_y: &Tensor) -> Tensor {
    let mut d_x = d_y.clone();
    for (g, x) in d_x.data_mut().iter_mut().zip(pre.data()) {
        if *x <= 0.0 {
            *g = 0.0;
        }
    }
    d_x
}

/// Dense layer `y = Wx + b`; `w`: out×in.
pub fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), i);
    let mut y = vec![0.0; o];
    for r in 0..o {
        let mut acc = b.data()[r];
        let row = &w.data()[r * i..(r + 1) * i];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        y[r] = acc;
    }
    y
}

/// Backward for [`dense`]: accumulates into `d_w`/`d_b`, returns `d_x`.
pub fn dense_backward(
    x: &[f64],
    w: &Tensor,
    d_y: &[f64],
    d_w: &mut Tensor,
    d_b: &mut Tensor,
) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut d_x = vec![0.0; i];
    for r in 0..o {
        let g = d_y[r];
        d_b.data_mut()[r] += g;
        if g == 0.0 {
            continue;
        }
        for c in 0..i {
            d_w.data_mut()[r * i + c] += g * x[c];
            d_x[c] += g * w.data()[r * i + c];
        }
    }
    d_x
}

/// Numerically stable binary cross-entropy on a logit.
/// Returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let grad = crate::attention::sigmoid(logit) - target;
    (loss, grad)
}

/// Softmax cross-entropy over one logit row.
/// Returns `(loss, probabilities, dloss/dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[label].max(1e-300).ln();
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    (loss, probs, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Smooth L1: `0.5x²` for |x| < 1, else `|x| − 0.5`. Returns `(value, dvalue/dx)`.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, grad_relative_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, h, wd, cout, k) = (2usize, 5usize, 4usize, 3usize, 3usize);
        let x = rt(&mut rng, vec![cin, h, wd]);
        let w = rt(&mut rng, vec![cout, cin, k, k]);
        let b = rt(&mut rng, vec![cout]);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let out = conv2d(&x, &w, &b, stride, pad);
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            assert_eq!(oh, (h + 2 * pad - k) / stride + 1);
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w.data()[widx(cin, k, o, c, ky, kx)]
                                            * x.at3(c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        assert!((out.at3(o, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, h, wd, cout, k) = (2usize, 4usize, 4usize, 2usize, 3usize);
        let x = rt(&mut rng, vec![cin, h, wd]);
        let w = rt(&mut rng, vec![cout, cin, k, k]);
        let b = rt(&mut rng, vec![cout]);
        let (oh, ow) = ((h + 2 - k) / 2 + 1, (wd + 2 - k) / 2 + 1);
        // scalar head: fixed random mixing of the conv output
        let mix = rt(&mut rng, vec![cout, oh, ow]);
        let f_of = |xx: &Tensor, ww: &Tensor, bb: &Tensor| {
            let y = conv2d(xx, ww, bb, 2, 1);
            y.data().iter().zip(mix.data()).map(|(a, m)| a * m).sum::<f64>()
        };
        let mut d_w = Tensor::zeros_like(&w);
        let mut d_b = Tensor::zeros_like(&b);
        let d_x = conv2d_backward(&x, &w, 2, 1, &mix, &mut d_w, &mut d_b);

        let fd_x = finite_difference_grad(|t| f_of(t, &w, &b), &x, FD_STEP).unwrap();
        assert!(grad_relative_error(&d_x, &fd_x) < 1e-6);
        let fd_w = finite_difference_grad(|t| f_of(&x, t, &b), &w, FD_STEP).unwrap();
        assert!(grad_relative_error(&d_w, &fd_w) < 1e-6);
        let fd_b = finite_difference_grad(|t| f_of(&x, &w, t), &b, FD_STEP).unwrap();
        assert!(grad_relative_error(&d_b, &fd_b) < 1e-6);
    }

    #[test]
    fn relu_backward_masks_negative_preactivations() {
        let pre = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let dy = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let dx = relu_backward(&pre, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rt(&mut rng, vec![3, 5]);
        let b = rt(&mut rng, vec![3]);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut d_w = Tensor::zeros_like(&w);
        let mut d_b = Tensor::zeros_like(&b);
        let d_x = dense_backward(&x, &w, &mix, &mut d_w, &mut d_b);

        let xt = Tensor::new(vec![5], x.clone()).unwrap();
        let fd_x = finite_difference_grad(
            |t| {
                dense(t.data(), &w, &b)
                    .iter()
                    .zip(&mix)
                    .map(|(a, m)| a * m)
                    .sum()
            },
            &xt,
            FD_STEP,
        )
        .unwrap();
        let d_x_t = Tensor::new(vec![5], d_x).unwrap();
        assert!(grad_relative_error(&d_x_t, &fd_x) < 1e-7);

        let fd_w = finite_difference_grad(
            |t| {
                dense(&x, t, &b)
                    .iter()
                    .zip(&mix)
                    .map(|(a, m)| a * m)
                    .sum()
            },
            &w,
            FD_STEP,
        )
        .unwrap();
        assert!(grad_relative_error(&d_w, &fd_w) < 1e-7);
    }

    #[test]
    fn bce_and_ce_gradients() {
        for (z, t) in [(0.7, 1.0), (-1.3, 0.0), (2.0, 0.0)] {
            let zt = Tensor::new(vec![1], vec![z]).unwrap();
            let (_, g) = bce_with_logit(z, t);
            let fd = finite_difference_grad(|x| bce_with_logit(x.data()[0], t).0, &zt, FD_STEP)
                .unwrap();
            assert!((g - fd.data()[0]).abs() < 1e-7);
        }
        let logits = vec![0.2, -1.0, 0.7];
        let lt = Tensor::new(vec![3], logits.clone()).unwrap();
        let (_, _, g) = softmax_cross_entropy(&logits, 2);
        let fd =
            finite_difference_grad(|x| softmax_cross_entropy(x.data(), 2).0, &lt, FD_STEP).unwrap();
        let gt = Tensor::new(vec![3], g).unwrap();
        assert!(grad_relative_error(&gt, &fd) < 1e-7);
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        assert_eq!(smooth_l1(0.5).0, 0.125);
        assert_eq!(smooth_l1(2.0).0, 1.5);
        assert_eq!(smooth_l1(-2.0).0, 1.5);
        assert_eq!(smooth_l1(0.0).0, 0.0);
    }
}
