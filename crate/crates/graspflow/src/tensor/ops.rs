//! Differentiable operations.
//!
//! Layout is NCHW row-major throughout. Convolutions use same padding, odd
//! kernels and stride 1; pooling windows must tile the input exactly. In f64,
//! convolution and dense products accumulate over the reduction index in
//! ascending order, so results are bit-identical to their plain nested-loop
//! definitions.

use super::{BatchNormState, Mode, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad, parents| {
            parents[0].accum_grad_slice(grad);
            parents[1].accum_grad_slice(grad);
        }),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            a.accum_grad_with(|slot| {
                for ((s, &g), &y) in slot.iter_mut().zip(grad).zip(b.data()) {
                    *s = *s + g * y;
                }
            });
            b.accum_grad_with(|slot| {
                for ((s, &g), &x) in slot.iter_mut().zip(grad).zip(a.data()) {
                    *s = *s + g * x;
                }
            });
        }),
    ))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for (s, &g) in slot.iter_mut().zip(grad) {
                    *s = *s + g * c;
                }
            });
        }),
    )
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    Tensor::from_op(
        vec![1],
        vec![acc],
        vec![x.clone()],
        Box::new(|grad, parents| {
            let g = grad[0];
            parents[0].accum_grad_with(|slot| {
                for s in slot.iter_mut() {
                    *s = *s + g;
                }
            });
        }),
    )
}

/// max(x, 0); the subgradient at exactly zero is zero.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for ((s, &g), &v) in slot.iter_mut().zip(grad).zip(parents[0].data()) {
                    if v > T::zero() {
                        *s = *s + g;
                    }
                }
            });
        }),
    )
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            // Evaluate the saturating branch to avoid overflow in exp.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
        .collect();
    let y = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for ((s, &g), &yv) in slot.iter_mut().zip(grad).zip(y.iter()) {
                    *s = *s + g * yv * (T::one() - yv);
                }
            });
        }),
    )
}

/// Same data, new shape; element count must be preserved.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() || shape.iter().any(|&e| e == 0) {
        return Err(Error::dimension(
            "reshape",
            format!("cannot view {:?} as {:?}", x.shape(), shape),
        ));
    }
    Ok(x.view_as(
        shape.to_vec(),
        vec![x.clone()],
        Box::new(|grad, parents| {
            parents[0].accum_grad_slice(grad);
        }),
    ))
}

/// Collapses all trailing axes into one: [n, ...] -> [n, rest].
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() < 2 {
        return Err(Error::dimension(
            "flatten",
            format!("need at least 2 axes, got {:?}", x.shape()),
        ));
    }
    let n = x.shape()[0];
    let rest = x.numel() / n;
    reshape(x, &[n, rest])
}

/// Fully connected layer: y[n,o] = sum_i x[n,i] * w[o,i] + b[o].
///
/// The sum over `i` runs in ascending order for every output element.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
        return Err(Error::dimension(
            "dense",
            format!("x {:?}, w {:?}, b {:?} are inconsistent", xs, ws, bs),
        ));
    }
    let (n, i, o) = (xs[0], xs[1], ws[0]);
    let mut y = vec![T::zero(); n * o];
    // y = x . w^T : w is [o, i] row-major, so its transpose has strides (1, i).
    T::gemm(n, i, o, x.data(), i, 1, w.data(), 1, i, &mut y, false);
    for row in y.chunks_exact_mut(o) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v = *v + bv;
        }
    }
    Ok(Tensor::from_op(
        vec![n, o],
        y,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |grad, parents| {
            let (x, w, b) = (&parents[0], &parents[1], &parents[2]);
            x.accum_grad_with(|slot| {
                // dx = dy . w
                T::gemm(n, o, i, grad, o, 1, w.data(), i, 1, slot, true);
            });
            w.accum_grad_with(|slot| {
                // dw = dy^T . x
                T::gemm(o, n, i, grad, 1, o, x.data(), i, 1, slot, true);
            });
            b.accum_grad_with(|slot| {
                for row in grad.chunks_exact(o) {
                    for (s, &g) in slot.iter_mut().zip(row) {
                        *s = *s + g;
                    }
                }
            });
        }),
    ))
}

/// Lowers one example to a patch matrix: row (oh*w + ow), column
/// ((c*kh_total + kh)*kw_total + kw). Out-of-bounds taps are zero.
fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let ckk = c_in * kh * kw;
    debug_assert_eq!(out.len(), h * w * ckk);
    let mut row = 0;
    for oh in 0..h {
        for ow in 0..w {
            let dst = &mut out[row * ckk..(row + 1) * ckk];
            let mut k = 0;
            for c in 0..c_in {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for dh in 0..kh {
                    let ih = oh + dh;
                    let in_h = ih >= ph && ih < h + ph;
                    for dw in 0..kw {
                        let iw = ow + dw;
                        dst[k] = if in_h && iw >= pw && iw < w + pw {
                            plane[(ih - ph) * w + (iw - pw)]
                        } else {
                            T::zero()
                        };
                        k += 1;
                    }
                }
            }
            row += 1;
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the input plane; the exact
/// adjoint of `im2col`.
fn col2im<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let ckk = c_in * kh * kw;
    let mut row = 0;
    for oh in 0..h {
        for ow in 0..w {
            let src = &cols[row * ckk..(row + 1) * ckk];
            let mut k = 0;
            for c in 0..c_in {
                let base = c * h * w;
                for dh in 0..kh {
                    let ih = oh + dh;
                    let in_h = ih >= ph && ih < h + ph;
                    for dw in 0..kw {
                        let iw = ow + dw;
                        if in_h && iw >= pw && iw < w + pw {
                            let idx = base + (ih - ph) * w + (iw - pw);
                            out[idx] = out[idx] + src[k];
                        }
                        k += 1;
                    }
                }
            }
            row += 1;
        }
    }
}

/// 2d convolution, stride 1, same padding. x is [n, c, h, w], w is
/// [o, c, kh, kw] with odd kh, kw; the result is [n, o, h, w].
///
/// Internally each example is lowered to a patch matrix and multiplied by the
/// flattened weights, so the reduction runs over (c, kh, kw) in ascending
/// order for every output element.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::dimension(
            "conv2d",
            format!("x {:?} and weight {:?} must both have 4 axes", xs, ws),
        ));
    }
    if xs[1] != ws[1] {
        return Err(Error::dimension(
            "conv2d",
            format!("input has {} channels but weight expects {}", xs[1], ws[1]),
        ));
    }
    if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
        return Err(Error::dimension(
            "conv2d",
            format!("same padding requires odd kernel extents, got {}x{}", ws[2], ws[3]),
        ));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (hw, ckk) = (h * w, c_in * kh * kw);
    let mut y = vec![T::zero(); n * o * hw];
    let mut cols = vec![T::zero(); hw * ckk];
    for e in 0..n {
        im2col(&x.data()[e * c_in * hw..(e + 1) * c_in * hw], c_in, h, w, kh, kw, &mut cols);
        // y_e [o, hw] = weight [o, ckk] . cols^T; cols is [hw, ckk] row-major,
        // so its transpose has strides (1, ckk).
        T::gemm(
            o,
            ckk,
            hw,
            weight.data(),
            ckk,
            1,
            &cols,
            1,
            ckk,
            &mut y[e * o * hw..(e + 1) * o * hw],
            false,
        );
    }
    Ok(Tensor::from_op(
        vec![n, o, h, w],
        y,
        vec![x.clone(), weight.clone()],
        Box::new(move |grad, parents| {
            let (x, weight) = (&parents[0], &parents[1]);
            // Patch matrices are recomputed here rather than kept alive from
            // the forward pass: recompute is cheap next to the matmuls and
            // saves hw*ckk floats per layer per batch.
            let mut cols = vec![T::zero(); hw * ckk];
            let mut dcols = vec![T::zero(); hw * ckk];
            for e in 0..n {
                let dy_e = &grad[e * o * hw..(e + 1) * o * hw];
                weight.accum_grad_with(|slot| {
                    im2col(
                        &x.data()[e * c_in * hw..(e + 1) * c_in * hw],
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        &mut cols,
                    );
                    // dw += dy_e [o, hw] . cols [hw, ckk]
                    T::gemm(o, hw, ckk, dy_e, hw, 1, &cols, ckk, 1, slot, true);
                });
                x.accum_grad_with(|slot| {
                    // dcols = dy_e^T [hw, o] . weight [o, ckk]
                    T::gemm(hw, o, ckk, dy_e, 1, hw, weight.data(), ckk, 1, &mut dcols, false);
                    col2im(
                        &dcols,
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        &mut slot[e * c_in * hw..(e + 1) * c_in * hw],
                    );
                });
            }
        }),
    ))
}

/// Adds a per-channel bias to an [n, c, h, w] tensor.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 || b.shape().len() != 1 || b.shape()[0] != xs[1] {
        return Err(Error::dimension(
            "add_channel_bias",
            format!("x {:?} incompatible with bias {:?}", xs, b.shape()),
        ));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let mut data = x.data().to_vec();
    for e in 0..n {
        for ch in 0..c {
            let bv = b.data()[ch];
            for v in &mut data[(e * c + ch) * hw..(e * c + ch + 1) * hw] {
                *v = *v + bv;
            }
        }
    }
    Ok(Tensor::from_op(
        xs.to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_slice(grad);
            parents[1].accum_grad_with(|slot| {
                for e in 0..n {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for &g in &grad[(e * c + ch) * hw..(e * c + ch + 1) * hw] {
                            acc = acc + g;
                        }
                        slot[ch] = slot[ch] + acc;
                    }
                }
            });
        }),
    ))
}

/// 2d max pooling with square window `size` and equal stride. Spatial extents
/// must be divisible by `size`. Ties go to the first element of the window in
/// row-major scan order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::dimension(
            "maxpool2d",
            format!("expected 4 axes, got {:?}", xs),
        ));
    }
    if size == 0 || xs[2] % size != 0 || xs[3] % size != 0 {
        return Err(Error::dimension(
            "maxpool2d",
            format!("window {} must tile spatial extents {}x{}", size, xs[2], xs[3]),
        ));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / size, w / size);
    let mut y = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; y.len()];
    let xd = x.data();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for py in 0..oh {
            for px in 0..ow {
                let mut best_idx = py * size * w + px * size;
                let mut best = src[best_idx];
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (py * size + dy) * w + (px * size + dx);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let out_idx = plane * oh * ow + py * ow + px;
                y[out_idx] = best;
                argmax[out_idx] = plane * h * w + best_idx;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        y,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for (&g, &src_idx) in grad.iter().zip(&argmax) {
                    slot[src_idx] = slot[src_idx] + g;
                }
            });
        }),
    ))
}

/// Batch normalization over an [n, c, h, w] tensor, normalizing each channel
/// across batch and spatial positions.
///
/// In train mode the batch mean and biased variance are used and folded into
/// the running estimates (`running = momentum * running + (1 - momentum) *
/// batch`); gradients flow through the batch statistics. In eval mode the
/// running estimates act as constants.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != state.channels() {
        return Err(Error::dimension(
            "batchnorm",
            format!("x {:?} incompatible with {} channels", xs, state.channels()),
        ));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (hw, m) = (h * w, n * h * w);
    let m_t = T::from_f64(m as f64);
    let xd = x.data();

    let per_channel = |f: &mut dyn FnMut(usize, &[T])| {
        for e in 0..n {
            for ch in 0..c {
                f(ch, &xd[(e * c + ch) * hw..(e * c + ch + 1) * hw]);
            }
        }
    };

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            per_channel(&mut |ch, src| {
                let mut acc = T::zero();
                for &v in src {
                    acc = acc + v;
                }
                mean[ch] = mean[ch] + acc;
            });
            for v in &mut mean {
                *v = *v / m_t;
            }
            let mut var = vec![T::zero(); c];
            per_channel(&mut |ch, src| {
                let mu = mean[ch];
                let mut acc = T::zero();
                for &v in src {
                    let d = v - mu;
                    acc = acc + d * d;
                }
                var[ch] = var[ch] + acc;
            });
            for v in &mut var {
                *v = *v / m_t;
            }
            for ch in 0..c {
                state.running_mean[ch] =
                    state.momentum * state.running_mean[ch] + (T::one() - state.momentum) * mean[ch];
                state.running_var[ch] =
                    state.momentum * state.running_var[ch] + (T::one() - state.momentum) * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };

    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + state.epsilon).sqrt()).collect();
    let scale_d = state.scale.data();
    let shift_d = state.shift.data();
    let mut y = vec![T::zero(); xd.len()];
    for e in 0..n {
        for ch in 0..c {
            let (mu, is, ga, be) = (mean[ch], invstd[ch], scale_d[ch], shift_d[ch]);
            let base = (e * c + ch) * hw;
            for i in 0..hw {
                y[base + i] = (xd[base + i] - mu) * is * ga + be;
            }
        }
    }

    let train = mode == Mode::Train;
    Ok(Tensor::from_op(
        xs.to_vec(),
        y,
        vec![x.clone(), state.scale.clone(), state.shift.clone()],
        Box::new(move |grad, parents| {
            let (x, scale, shift) = (&parents[0], &parents[1], &parents[2]);
            let xd = x.data();
            let scale_d = scale.data();
            // Channel sums shared by every input gradient: sum(dy*xhat) and
            // sum(dy).
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for e in 0..n {
                for ch in 0..c {
                    let base = (e * c + ch) * hw;
                    let (mu, is) = (mean[ch], invstd[ch]);
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for i in 0..hw {
                        let g = grad[base + i];
                        sg = sg + g;
                        sgx = sgx + g * (xd[base + i] - mu) * is;
                    }
                    sum_g[ch] = sum_g[ch] + sg;
                    sum_gx[ch] = sum_gx[ch] + sgx;
                }
            }
            shift.accum_grad_with(|slot| {
                for ch in 0..c {
                    slot[ch] = slot[ch] + sum_g[ch];
                }
            });
            scale.accum_grad_with(|slot| {
                for ch in 0..c {
                    slot[ch] = slot[ch] + sum_gx[ch];
                }
            });
            x.accum_grad_with(|slot| {
                for e in 0..n {
                    for ch in 0..c {
                        let base = (e * c + ch) * hw;
                        let (mu, is, ga) = (mean[ch], invstd[ch], scale_d[ch]);
                        if train {
                            // Batch statistics depend on x: the gradient picks
                            // up the mean and variance paths.
                            for i in 0..hw {
                                let xhat = (xd[base + i] - mu) * is;
                                let centered = grad[base + i] * m_t - sum_g[ch] - xhat * sum_gx[ch];
                                slot[base + i] = slot[base + i] + ga * is * centered / m_t;
                            }
                        } else {
                            for i in 0..hw {
                                slot[base + i] = slot[base + i] + grad[base + i] * ga * is;
                            }
                        }
                    }
                }
            });
        }),
    ))
}

/// Row-wise softmax of a [n, k] tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::dimension(
            "softmax",
            format!("expected [n, k], got {:?}", xs),
        ));
    }
    let (n, k) = (xs[0], xs[1]);
    let mut y = vec![T::zero(); n * k];
    for (row, out) in x.data().chunks_exact(k).zip(y.chunks_exact_mut(k)) {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mx).exp();
            denom = denom + *o;
        }
        for o in out.iter_mut() {
            *o = *o / denom;
        }
    }
    let probs = y.clone();
    Ok(Tensor::from_op(
        vec![n, k],
        y,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for r in 0..n {
                    let p = &probs[r * k..(r + 1) * k];
                    let g = &grad[r * k..(r + 1) * k];
                    let mut dot = T::zero();
                    for i in 0..k {
                        dot = dot + p[i] * g[i];
                    }
                    for i in 0..k {
                        slot[r * k + i] = slot[r * k + i] + p[i] * (g[i] - dot);
                    }
                }
            });
        }),
    ))
}

/// Mean negative log-likelihood of the labelled class under a row-wise
/// softmax; logits are [n, k], labels index into each row.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let xs = logits.shape();
    if xs.len() != 2 {
        return Err(Error::dimension(
            "softmax_cross_entropy",
            format!("expected [n, k] logits, got {:?}", xs),
        ));
    }
    let (n, k) = (xs[0], xs[1]);
    if labels.len() != n {
        return Err(Error::dimension(
            "softmax_cross_entropy",
            format!("{} labels for {} rows", labels.len(), n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for ((row, out), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(probs.chunks_exact_mut(k))
        .zip(labels)
    {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mx).exp();
            denom = denom + *o;
        }
        for o in out.iter_mut() {
            *o = *o / denom;
        }
        loss = loss - ((row[label] - mx) - denom.ln());
    }
    loss = loss / T::from_f64(n as f64);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |grad, parents| {
            let g = grad[0] / T::from_f64(n as f64);
            parents[0].accum_grad_with(|slot| {
                for r in 0..n {
                    for i in 0..k {
                        let indicator = if labels[r] == i { T::one() } else { T::zero() };
                        slot[r * k + i] = slot[r * k + i] + g * (probs[r * k + i] - indicator);
                    }
                }
            });
        }),
    ))
}

/// Broadcasts one scalar per example to a constant [n, c, h, w] block.
pub fn tile_scalar<T: Scalar>(z: &Tensor<T>, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let zs = z.shape();
    let n = zs[0];
    let per_example_scalar = zs.iter().product::<usize>() == n;
    if !per_example_scalar {
        return Err(Error::dimension(
            "tile_scalar",
            format!("expected one value per example, got {:?}", zs),
        ));
    }
    let chw = c * h * w;
    let mut data = vec![T::zero(); n * chw];
    for (e, &v) in z.data().iter().enumerate() {
        for d in &mut data[e * chw..(e + 1) * chw] {
            *d = v;
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        data,
        vec![z.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for (e, s) in slot.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &g in &grad[e * chw..(e + 1) * chw] {
                        acc = acc + g;
                    }
                    *s = *s + acc;
                }
            });
        }),
    ))
}

/// Concatenates two [n, c, h, w] tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::dimension(
            "concat_channels",
            format!("shapes {:?} and {:?} only differ in channels", sa, sb),
        ));
    }
    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let c = ca + cb;
    let mut data = vec![T::zero(); n * c * hw];
    for e in 0..n {
        data[e * c * hw..e * c * hw + ca * hw]
            .copy_from_slice(&a.data()[e * ca * hw..(e + 1) * ca * hw]);
        data[e * c * hw + ca * hw..(e + 1) * c * hw]
            .copy_from_slice(&b.data()[e * cb * hw..(e + 1) * cb * hw]);
    }
    Ok(Tensor::from_op(
        vec![n, c, sa[2], sa[3]],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |grad, parents| {
            parents[0].accum_grad_with(|slot| {
                for e in 0..n {
                    let src = &grad[e * c * hw..e * c * hw + ca * hw];
                    for (s, &g) in slot[e * ca * hw..(e + 1) * ca * hw].iter_mut().zip(src) {
                        *s = *s + g;
                    }
                }
            });
            parents[1].accum_grad_with(|slot| {
                for e in 0..n {
                    let src = &grad[e * c * hw + ca * hw..(e + 1) * c * hw];
                    for (s, &g) in slot[e * cb * hw..(e + 1) * cb * hw].iter_mut().zip(src) {
                        *s = *s + g;
                    }
                }
            });
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    /// Definition-level convolution: six nested loops, reduction in (c, kh,
    /// kw) order, zero padding by skipping out-of-bounds taps.
    fn conv2d_naive(
        x: &[f64],
        w: &[f64],
        n: usize,
        c_in: usize,
        h: usize,
        wd: usize,
        o: usize,
        kh: usize,
        kw: usize,
    ) -> Vec<f64> {
        let (ph, pw) = (kh / 2, kw / 2);
        let mut y = vec![0.0; n * o * h * wd];
        for e in 0..n {
            for oc in 0..o {
                for oh in 0..h {
                    for ow in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ih = oh + dh;
                                    let iw = ow + dw;
                                    if ih >= ph && ih < h + ph && iw >= pw && iw < wd + pw {
                                        let xv = x[((e * c_in + c) * h + ih - ph) * wd + iw - pw];
                                        let wv = w[((oc * c_in + c) * kh + dh) * kw + dw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[((e * o + oc) * h + oh) * wd + ow] = acc;
                    }
                }
            }
        }
        y
    }

    fn dense_naive(x: &[f64], w: &[f64], b: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * o];
        for r in 0..n {
            for oc in 0..o {
                let mut acc = 0.0;
                for k in 0..i {
                    acc += x[r * i + k] * w[oc * i + k];
                }
                y[r * o + oc] = acc + b[oc];
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_loops_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, c, h, w, o, kh, kw) in
            &[(2, 3, 5, 5, 4, 3, 3), (1, 1, 7, 4, 2, 5, 3), (3, 2, 4, 6, 1, 1, 1)]
        {
            let x = randn(&mut rng, n * c * h * w);
            let wt = randn(&mut rng, o * c * kh * kw);
            let got = conv2d(
                &Tensor::from_vec(&[n, c, h, w], x.clone()),
                &Tensor::from_vec(&[o, c, kh, kw], wt.clone()),
            )
            .unwrap();
            let want = conv2d_naive(&x, &wt, n, c, h, w, o, kh, kw);
            assert_eq!(got.data(), &want[..], "shape ({n},{c},{h},{w},{o},{kh},{kw})");
        }
    }

    #[test]
    fn dense_matches_naive_loops_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, i, o) = (4, 37, 9);
        let x = randn(&mut rng, n * i);
        let w = randn(&mut rng, o * i);
        let b = randn(&mut rng, o);
        let got = dense(
            &Tensor::from_vec(&[n, i], x.clone()),
            &Tensor::from_vec(&[o, i], w.clone()),
            &Tensor::from_vec(&[o], b.clone()),
        )
        .unwrap();
        assert_eq!(got.data(), &dense_naive(&x, &w, &b, n, i, o)[..]);
    }

    #[test]
    fn conv2d_rejects_even_kernels_and_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[3, 2, 2, 3])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 1, 3, 3])).is_err());
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let (n, c, h, w, o, kh, kw) = (2, 2, 4, 4, 3, 3, 3);
        let nx = n * c * h * w;
        let nw = o * c * kh * kw;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let point = randn(&mut rng, nx + nw);
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[n, c, h, w], p[..nx].to_vec());
                let wt = Tensor::param(&[o, c, kh, kw], p[nx..].to_vec());
                let y = conv2d(&x, &wt)?;
                Ok((sum_all(&mul(&y, &y)?), vec![x, wt]))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let (n, i, o) = (3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let point = randn(&mut rng, n * i + o * i + o);
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[n, i], p[..n * i].to_vec());
                let w = Tensor::param(&[o, i], p[n * i..n * i + o * i].to_vec());
                let b = Tensor::param(&[o], p[n * i + o * i..].to_vec());
                let y = dense(&x, &w, &b)?;
                Ok((sum_all(&mul(&y, &y)?), vec![x, w, b]))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn maxpool_matches_naive_and_breaks_ties_low() {
        // Plane with a duplicated maximum inside one window: the gradient must
        // land on the first occurrence in row-major order.
        let x = Tensor::<f64>::param(
            &[1, 1, 2, 4],
            vec![
                5.0, 5.0, 1.0, 2.0, //
                3.0, 4.0, 2.0, 1.0,
            ],
        );
        let y = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 2.0]);
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_nondividing_window() {
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 5, 4]), 2).is_err());
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        // Distinct values keep finite differences away from argmax switches.
        let vals: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7919).sin() * 3.0).collect();
        let err = grad_check(
            &vals,
            |p| {
                let x = Tensor::param(&[2, 1, 4, 4], p.to_vec());
                let y = maxpool2d(&x, 2)?;
                Ok((sum_all(&mul(&y, &y)?), vec![x]))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn relu_zero_input_has_zero_subgradient() {
        let x = Tensor::<f64>::param(&[3], vec![-1.0, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let point = vec![-3.0, -0.5, 0.1, 2.0, 40.0, -40.0];
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[p.len()], p.to_vec());
                Ok((sum_all(&mul(&sigmoid(&x), &sigmoid(&x))?), vec![x]))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn batchnorm_train_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (n, c, h, w) = (4, 3, 5, 5);
        let x = Tensor::from_vec(&[n, c, h, w], randn(&mut rng, n * c * h * w));
        let mut state = BatchNormState::<f64>::new(c, 0.9, 1e-5).unwrap();
        let y = batchnorm(&x, &mut state, Mode::Train).unwrap();
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for e in 0..n {
                for i in 0..h * w {
                    mean += y.data()[(e * c + ch) * h * w + i];
                }
            }
            mean /= m;
            for e in 0..n {
                for i in 0..h * w {
                    let d = y.data()[(e * c + ch) * h * w + i] - mean;
                    var += d * d;
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-12, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batchnorm_running_stats_blend_with_momentum() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0f64, 3.0]);
        let mut state = BatchNormState::<f64>::new(1, 0.9, 1e-5).unwrap();
        batchnorm(&x, &mut state, Mode::Train).unwrap();
        // Batch mean 2, biased variance 1; running stats start at (0, 1).
        assert!((state.running_mean[0] - (0.9 * 0.0 + 0.1 * 2.0)).abs() < 1e-15);
        assert!((state.running_var[0] - (0.9 * 1.0 + 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_only() {
        let mut state = BatchNormState::<f64>::new(1, 0.9, 1e-5).unwrap();
        state.running_mean[0] = 2.0;
        state.running_var[0] = 4.0;
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0f64, 6.0]);
        let y = batchnorm(&x, &mut state, Mode::Eval).unwrap();
        // (x - 2) / sqrt(4 + 1e-5)
        assert!((y.data()[0] - 0.0).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        // Eval must not move the running estimates.
        assert_eq!(state.running_mean[0], 2.0);
        assert_eq!(state.running_var[0], 4.0);
    }

    #[test]
    fn batchnorm_train_gradient_matches_finite_differences() {
        let (n, c, h, w) = (3, 2, 2, 2);
        let nx = n * c * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut point = randn(&mut rng, nx + 2 * c);
        for (i, v) in point[nx..nx + c].iter_mut().enumerate() {
            *v = 1.0 + 0.1 * i as f64; // scale away from zero
        }
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[n, c, h, w], p[..nx].to_vec());
                let mut state = BatchNormState::<f64>::new(c, 0.9, 1e-5).unwrap();
                state.scale = Tensor::param(&[c], p[nx..nx + c].to_vec());
                state.shift = Tensor::param(&[c], p[nx + c..].to_vec());
                let y = batchnorm(&x, &mut state, Mode::Train)?;
                let params = vec![x, state.scale.clone(), state.shift.clone()];
                Ok((sum_all(&mul(&y, &y)?), params))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn batchnorm_eval_gradient_matches_finite_differences() {
        let (n, c, h, w) = (2, 2, 2, 2);
        let nx = n * c * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let point = randn(&mut rng, nx + 2 * c);
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[n, c, h, w], p[..nx].to_vec());
                let mut state = BatchNormState::<f64>::new(c, 0.9, 1e-5).unwrap();
                state.scale = Tensor::param(&[c], p[nx..nx + c].to_vec());
                state.shift = Tensor::param(&[c], p[nx + c..].to_vec());
                state.running_mean = vec![0.3, -0.2];
                state.running_var = vec![1.5, 0.7];
                let y = batchnorm(&x, &mut state, Mode::Eval)?;
                let params = vec![x, state.scale.clone(), state.shift.clone()];
                Ok((sum_all(&mul(&y, &y)?), params))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 1000.0, 1001.0, 1002.0]);
        let y = softmax(&x).unwrap();
        for row in y.data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Rows differ by a constant shift, so the distributions match.
        for i in 0..3 {
            assert!((y.data()[i] - y.data()[3 + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax_by_hand() {
        let logits = vec![0.2f64, -1.3, 0.8, 0.5];
        let t = Tensor::from_vec(&[2, 2], logits.clone());
        let loss = softmax_cross_entropy(&t, &[1, 0]).unwrap();
        let mut want = 0.0;
        for (r, &label) in [1usize, 0].iter().enumerate() {
            let a = logits[2 * r];
            let b = logits[2 * r + 1];
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let picked = if label == 0 { a } else { b };
            want += lse - picked;
        }
        want /= 2.0;
        assert!((loss.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let point = randn(&mut rng, 4 * 3);
        let labels = [2usize, 0, 1, 1];
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[4, 3], p.to_vec());
                Ok((softmax_cross_entropy(&x, &labels)?, vec![x]))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        assert!(softmax_cross_entropy(&t, &[0]).is_err());
        assert!(softmax_cross_entropy(&t, &[0, 2]).is_err());
    }

    #[test]
    fn tile_concat_reshape_gradients_match_finite_differences() {
        let (n, c1, h, w) = (2, 2, 2, 2);
        let nx = n * c1 * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let point = randn(&mut rng, nx + n);
        let err = grad_check(
            &point,
            |p| {
                let a = Tensor::param(&[n, c1, h, w], p[..nx].to_vec());
                let z = Tensor::param(&[n], p[nx..].to_vec());
                let tiled = tile_scalar(&z, 3, h, w)?;
                let cat = concat_channels(&a, &tiled)?;
                let flat = flatten(&cat)?;
                Ok((sum_all(&mul(&flat, &flat)?), vec![a, z]))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn tile_scalar_broadcasts_per_example() {
        let z = Tensor::from_vec(&[2], vec![0.25f64, -1.5]);
        let t = tile_scalar(&z, 2, 1, 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1, 2]);
        assert_eq!(t.data(), &[0.25, 0.25, 0.25, 0.25, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn concat_channels_interleaves_per_example() {
        let a = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 1, 1, 2], vec![9.0f64, 8.0, 7.0, 6.0]);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 9.0, 8.0, 3.0, 4.0, 7.0, 6.0]);
    }

    #[test]
    fn add_channel_bias_gradient_matches_finite_differences() {
        let (n, c, h, w) = (2, 3, 2, 2);
        let nx = n * c * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let point = randn(&mut rng, nx + c);
        let err = grad_check(
            &point,
            |p| {
                let x = Tensor::param(&[n, c, h, w], p[..nx].to_vec());
                let b = Tensor::param(&[c], p[nx..].to_vec());
                let y = add_channel_bias(&x, &b)?;
                Ok((sum_all(&mul(&y, &y)?), vec![x, b]))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn f32_conv_close_to_f64_reference() {
        // The f32 path uses a blocked kernel with a different summation
        // order; it must still agree with the f64 reference to single
        // precision.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, c, h, w, o, k) = (2, 3, 8, 8, 4, 3);
        let x = randn(&mut rng, n * c * h * w);
        let wt = randn(&mut rng, o * c * k * k);
        let y64 = conv2d(
            &Tensor::from_vec(&[n, c, h, w], x.clone()),
            &Tensor::from_vec(&[o, c, k, k], wt.clone()),
        )
        .unwrap();
        let y32 = conv2d(
            &Tensor::from_vec(&[n, c, h, w], x.iter().map(|&v| v as f32).collect()),
            &Tensor::from_vec(&[o, c, k, k], wt.iter().map(|&v| v as f32).collect()),
        )
        .unwrap();
        for (&a, &b) in y64.data().iter().zip(y32.data()) {
            assert!((a - b as f64).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
