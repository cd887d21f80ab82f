//! Depthwise and grouped 2-D convolution on `[N, H, W, C]` tensors.
//!
//! Convolution here means cross-correlation: no kernel flip, indices walk
//! forward, `out[i,j,c] = sum_{p,q} K[p,q,c] * in[i+p-pad, j+q-pad, c]` with
//! zero padding. Output spatial size always equals input spatial size, which
//! pins `pad` to `floor(k/2)`.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::window::require_odd;

/// Per-thread tally of convolution work, used to assert structural claims
/// (one merged convolution versus two parallel ones) without a wall clock.
pub mod op_counter {
    use super::Cell;

    /// Snapshot of convolution activity on the current thread.
    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct ConvOpStats {
        pub depthwise_calls: u64,
        pub grouped_calls: u64,
        /// Nominal multiply-accumulate count: `N*H*W*C*G*k*k` per call,
        /// border taps included.
        pub madds: u64,
    }

    thread_local! {
        static STATS: Cell<ConvOpStats> = const { Cell::new(ConvOpStats {
            depthwise_calls: 0,
            grouped_calls: 0,
            madds: 0,
        }) };
    }

    pub fn reset() {
        STATS.with(|s| s.set(ConvOpStats::default()));
    }

    pub fn stats() -> ConvOpStats {
        STATS.with(|s| s.get())
    }

    pub(super) fn record_depthwise(madds: u64) {
        STATS.with(|s| {
            let mut v = s.get();
            v.depthwise_calls += 1;
            v.madds += madds;
            s.set(v);
        });
    }

    pub(super) fn record_grouped(madds: u64) {
        STATS.with(|s| {
            let mut v = s.get();
            v.grouped_calls += 1;
            v.madds += madds;
            s.set(v);
        });
    }
}

fn check_kernel_3d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize)> {
    let (_, _, _, c) = input.dims4()?;
    let (k0, k1, kc) = match kernel.shape()[..] {
        [k0, k1, kc] => (k0, k1, kc),
        _ => {
            return Err(Error::shape(format!(
                "depthwise kernel must be [k,k,C], got {:?}",
                kernel.shape()
            )))
        }
    };
    if k0 != k1 {
        return Err(Error::shape(format!(
            "kernel must be square, got {k0}x{k1}"
        )));
    }
    require_odd(k0)?;
    if kc != c {
        return Err(Error::shape(format!(
            "kernel channels {kc} do not match input channels {c}"
        )));
    }
    Ok((k0, c))
}

fn check_kernel_4d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (_, _, _, c) = input.dims4()?;
    let (k0, k1, kc, g) = match kernels.shape()[..] {
        [k0, k1, kc, g] => (k0, k1, kc, g),
        _ => {
            return Err(Error::shape(format!(
                "grouped kernels must be [k,k,C,G], got {:?}",
                kernels.shape()
            )))
        }
    };
    if k0 != k1 {
        return Err(Error::shape(format!(
            "kernel must be square, got {k0}x{k1}"
        )));
    }
    require_odd(k0)?;
    if kc != c {
        return Err(Error::shape(format!(
            "kernel channels {kc} do not match input channels {c}"
        )));
    }
    if g == 0 {
        return Err(Error::shape("group multiplier G must be at least 1"));
    }
    Ok((k0, c, g))
}

fn check_pad(k: usize, pad: usize) -> Result<()> {
    if pad != k / 2 {
        return Err(Error::config(format!(
            "same-size convolution requires pad = floor(k/2) = {}, got {pad}",
            k / 2
        )));
    }
    Ok(())
}

/// Per-channel cross-correlation with a `[k, k, C]` kernel; output shape
/// equals input shape.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, h, w, c) = input.dims4()?;
    let (k, _) = check_kernel_3d(input, kernel)?;
    check_pad(k, pad)?;
    op_counter::record_depthwise((n * h * w * c * k * k) as u64);

    let mut out = Tensor::zeros([n, h, w, c]);
    let xd = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let out_px = &mut od[((ni * h + hi) * w + wi) * c..][..c];
                for p in 0..k {
                    let ih = hi as i64 + p as i64 - pad as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    for q in 0..k {
                        let iw = wi as i64 + q as i64 - pad as i64;
                        if iw < 0 || iw >= w as i64 {
                            continue;
                        }
                        let in_px = &xd[((ni * h + ih as usize) * w + iw as usize) * c..][..c];
                        let ker_px = &kd[(p * k + q) * c..][..c];
                        for ((o, &x), &kv) in out_px.iter_mut().zip(in_px).zip(ker_px) {
                            *o = *o + x * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`] w.r.t. input and kernel.
pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, h, w, c) = input.dims4()?;
    let (k, _) = check_kernel_3d(input, kernel)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(format!(
            "upstream gradient shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let pad = k / 2;

    let mut grad_in = Tensor::zeros([n, h, w, c]);
    let mut grad_k = Tensor::zeros(kernel.shape().to_vec());
    let xd = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let gid = grad_in.data_mut();
    let gkd = grad_k.data_mut();
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let g_px = &gd[((ni * h + hi) * w + wi) * c..][..c];
                for p in 0..k {
                    let ih = hi as i64 + p as i64 - pad as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    for q in 0..k {
                        let iw = wi as i64 + q as i64 - pad as i64;
                        if iw < 0 || iw >= w as i64 {
                            continue;
                        }
                        let src = ((ni * h + ih as usize) * w + iw as usize) * c;
                        let kb = (p * k + q) * c;
                        for ci in 0..c {
                            gid[src + ci] = gid[src + ci] + kd[kb + ci] * g_px[ci];
                            gkd[kb + ci] = gkd[kb + ci] + xd[src + ci] * g_px[ci];
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}

/// Grouped convolution with `[k, k, C, G]` kernels: every input channel `c`
/// produces `G` output channels, one per kernel slice `(., ., c, g)`. Output
/// shape is `[N, H, W, C*G]` with channel index `c*G + g` (the `G` outputs of
/// one input channel stay adjacent).
pub fn grouped_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, h, w, c) = input.dims4()?;
    let (k, _, g) = check_kernel_4d(input, kernels)?;
    check_pad(k, pad)?;
    op_counter::record_grouped((n * h * w * c * g * k * k) as u64);

    let cg = c * g;
    let mut out = Tensor::zeros([n, h, w, cg]);
    let xd = input.data();
    let kd = kernels.data();
    let od = out.data_mut();

    // Output-pixel-outer: the accumulator pixel stays cache-hot across all
    // k*k taps and the whole kernel stack is small enough to sit in L1.
    // Each input channel broadcasts against its G contiguous kernel taps.
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let out_px = &mut od[((ni * h + hi) * w + wi) * cg..][..cg];
                for p in 0..k {
                    let ih = hi as i64 + p as i64 - pad as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    for q in 0..k {
                        let iw = wi as i64 + q as i64 - pad as i64;
                        if iw < 0 || iw >= w as i64 {
                            continue;
                        }
                        let in_px = &xd[((ni * h + ih as usize) * w + iw as usize) * c..][..c];
                        let ker_pq = &kd[(p * k + q) * cg..][..cg];
                        for ((&x, kc), oc) in in_px
                            .iter()
                            .zip(ker_pq.chunks_exact(g))
                            .zip(out_px.chunks_exact_mut(g))
                        {
                            for (o, &kv) in oc.iter_mut().zip(kc) {
                                *o = *o + x * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`grouped_conv2d`] w.r.t. input and kernels.
pub fn grouped_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, h, w, c) = input.dims4()?;
    let (k, _, g) = check_kernel_4d(input, kernels)?;
    let cg = c * g;
    let expected = [n, h, w, cg];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "upstream gradient shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let pad = k / 2;

    let mut grad_in = Tensor::zeros([n, h, w, c]);
    let mut grad_k = Tensor::zeros(kernels.shape().to_vec());
    let xd = input.data();
    let kd = kernels.data();
    let gd = grad_out.data();
    let gid = grad_in.data_mut();
    let gkd = grad_k.data_mut();
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let g_px = &gd[((ni * h + hi) * w + wi) * cg..][..cg];
                for p in 0..k {
                    let ih = hi as i64 + p as i64 - pad as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    for q in 0..k {
                        let iw = wi as i64 + q as i64 - pad as i64;
                        if iw < 0 || iw >= w as i64 {
                            continue;
                        }
                        let src = ((ni * h + ih as usize) * w + iw as usize) * c;
                        let kb = (p * k + q) * cg;
                        for ci in 0..c {
                            let x = xd[src + ci];
                            let mut acc = T::zero();
                            for gi in 0..g {
                                let gv = g_px[ci * g + gi];
                                acc = acc + kd[kb + ci * g + gi] * gv;
                                gkd[kb + ci * g + gi] = gkd[kb + ci * g + gi] + x * gv;
                            }
                            gid[src + ci] = gid[src + ci] + acc;
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}
