//! Dense 2D convolution and its transpose, with backward rules.
//!
//! Layouts: input `[B, C, H, W]`, kernel `[Co, Ci, kh, kw]` (row-major).
//! `conv2d_transpose` uses the same kernel layout with the roles swapped:
//! it consumes `Co` channels and produces `Ci`, which makes it the exact
//! adjoint of `conv2d` with the same kernel tensor.

use super::{ensure_finite, DenseTensor, Tape};
use crate::error::{Error, Result};
use std::rc::Rc;

fn dims4(op: &'static str, t: &DenseTensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("{what} must be rank 4, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Inclusive output range `[lo, hi]` such that `0 <= o*stride + k - pad < size`.
fn out_range(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let s = stride as i64;
    let off = k as i64 - pad as i64;
    let lo = (-off).div_euclid(s) + if (-off).rem_euclid(s) > 0 { 1 } else { 0 };
    let hi = (in_size as i64 - 1 - off).div_euclid(s);
    let lo = lo.max(0) as usize;
    if hi < lo as i64 {
        return (1, 0); // empty
    }
    (lo, (hi as usize).min(out_size.saturating_sub(1)))
}

struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

/// `out[b,co,oh,ow] = Σ_{ci,u,v} in[b,ci,oh·s+u-p, ow·s+v-p] · k[co,ci,u,v]`.
fn conv2d_forward(inp: &[f64], ker: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.cout * d.oh * d.ow];
    for b in 0..d.b {
        for co in 0..d.cout {
            for ci in 0..d.cin {
                for u in 0..d.kh {
                    let (oh_lo, oh_hi) = out_range(u, d.pad, d.stride, d.h, d.oh);
                    if oh_lo > oh_hi {
                        continue;
                    }
                    for v in 0..d.kw {
                        let wgt = ker[((co * d.cin + ci) * d.kh + u) * d.kw + v];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = out_range(v, d.pad, d.stride, d.w, d.ow);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * d.stride + u - d.pad;
                            let in_row = (b * d.cin + ci) * d.h * d.w + ih * d.w;
                            let out_row = (b * d.cout + co) * d.oh * d.ow + oh * d.ow;
                            let mut iw = ow_lo * d.stride + v - d.pad;
                            for ow in ow_lo..=ow_hi {
                                out[out_row + ow] += wgt * inp[in_row + iw];
                                iw += d.stride;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input and kernel.
fn conv2d_backward(
    dout: &[f64],
    inp: &[f64],
    ker: &[f64],
    d: &ConvDims,
    want_dinp: bool,
    want_dker: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dinp = vec![0.0; if want_dinp { inp.len() } else { 0 }];
    let mut dker = vec![0.0; if want_dker { ker.len() } else { 0 }];
    for b in 0..d.b {
        for co in 0..d.cout {
            for ci in 0..d.cin {
                for u in 0..d.kh {
                    let (oh_lo, oh_hi) = out_range(u, d.pad, d.stride, d.h, d.oh);
                    if oh_lo > oh_hi {
                        continue;
                    }
                    for v in 0..d.kw {
                        let kidx = ((co * d.cin + ci) * d.kh + u) * d.kw + v;
                        let wgt = ker[kidx];
                        let (ow_lo, ow_hi) = out_range(v, d.pad, d.stride, d.w, d.ow);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        let mut kacc = 0.0;
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * d.stride + u - d.pad;
                            let in_row = (b * d.cin + ci) * d.h * d.w + ih * d.w;
                            let out_row = (b * d.cout + co) * d.oh * d.ow + oh * d.ow;
                            let mut iw = ow_lo * d.stride + v - d.pad;
                            for ow in ow_lo..=ow_hi {
                                let g = dout[out_row + ow];
                                if want_dinp {
                                    dinp[in_row + iw] += wgt * g;
                                }
                                kacc += inp[in_row + iw] * g;
                                iw += d.stride;
                            }
                        }
                        if want_dker {
                            dker[kidx] += kacc;
                        }
                    }
                }
            }
        }
    }
    (dinp, dker)
}

/// 2D convolution over `[B, C, H, W]` with kernel `[Co, C, kh, kw]`.
///
/// Output spatial size is `floor((H + 2·pad - kh)/stride) + 1` per axis.
pub fn conv2d(
    tape: &mut Tape,
    input: &DenseTensor,
    kernel: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let (b, cin, h, w) = dims4("conv2d", input, "input")?;
    let (cout, kcin, kh, kw) = dims4("conv2d", kernel, "kernel")?;
    if stride < 1 {
        return Err(Error::shape("conv2d", "stride must be >= 1"));
    }
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channel axis is {cin} but kernel expects {kcin}"),
        ));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let d = ConvDims { b, cin, cout, h, w, kh, kw, oh, ow, stride, pad: padding };
    let out = conv2d_forward(input.values(), kernel.values(), &d);
    ensure_finite("conv2d", &out)?;
    let node = tape.node_for_output(input.is_tracked() || kernel.is_tracked(), out.len());
    if let Some(id) = node {
        let (in_node, k_node) = (input.node(), kernel.node());
        let (iv, kv) = (input.shared_values(), kernel.shared_values());
        tape.record(id, move |dout, grads| {
            let (dinp, dker) = conv2d_backward(
                dout,
                &iv,
                &kv,
                &d,
                in_node.is_some(),
                k_node.is_some(),
            );
            if let Some(n) = in_node {
                grads.accumulate(n, &dinp);
            }
            if let Some(n) = k_node {
                grads.accumulate(n, &dker);
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![b, cout, oh, ow], node))
}

/// Transposed 2D convolution (the adjoint of [`conv2d`] with the same
/// kernel). Input `[B, Co, H, W]`, kernel `[Co, Ci, kh, kw]`, output
/// `[B, Ci, (H-1)·stride - 2·pad + kh, ...]`.
pub fn conv2d_transpose(
    tape: &mut Tape,
    input: &DenseTensor,
    kernel: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let (b, cin, h, w) = dims4("conv2d_transpose", input, "input")?;
    let (kco, kci, kh, kw) = dims4("conv2d_transpose", kernel, "kernel")?;
    if stride < 1 {
        return Err(Error::shape("conv2d_transpose", "stride must be >= 1"));
    }
    if kco != cin {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input channel axis is {cin} but kernel leading axis is {kco}"),
        ));
    }
    let oh_i = (h as i64 - 1) * stride as i64 - 2 * padding as i64 + kh as i64;
    let ow_i = (w as i64 - 1) * stride as i64 - 2 * padding as i64 + kw as i64;
    if oh_i <= 0 || ow_i <= 0 {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("non-positive output size {oh_i}x{ow_i}"),
        ));
    }
    let (oh, ow) = (oh_i as usize, ow_i as usize);
    // Roles swapped relative to conv2d: the transpose forward scatters like
    // the conv backward-input pass over an output of size (oh, ow).
    let d = ConvDims {
        b,
        cin: kci,
        cout: cin,
        h: oh,
        w: ow,
        kh,
        kw,
        oh: h,
        ow: w,
        stride,
        pad: padding,
    };
    let scatter = |src: &[f64], ker: &[f64]| -> Vec<f64> {
        // out[b, c, oh*s+u-p, ow*s+v-p] += k[co, c, u, v] * src[b, co, oh, ow]
        let mut out = vec![0.0; b * kci * oh * ow];
        for bi in 0..b {
            for co in 0..cin {
                for c in 0..kci {
                    for u in 0..kh {
                        let (lo_h, hi_h) = out_range(u, padding, stride, oh, h);
                        if lo_h > hi_h {
                            continue;
                        }
                        for v in 0..kw {
                            let wgt = ker[((co * kci + c) * kh + u) * kw + v];
                            if wgt == 0.0 {
                                continue;
                            }
                            let (lo_w, hi_w) = out_range(v, padding, stride, ow, w);
                            if lo_w > hi_w {
                                continue;
                            }
                            for sh in lo_h..=hi_h {
                                let th = sh * stride + u - padding;
                                let src_row = (bi * cin + co) * h * w + sh * w;
                                let out_row = (bi * kci + c) * oh * ow + th * ow;
                                let mut tw = lo_w * stride + v - padding;
                                for sw in lo_w..=hi_w {
                                    out[out_row + tw] += wgt * src[src_row + sw];
                                    tw += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    };
    let out = scatter(input.values(), kernel.values());
    ensure_finite("conv2d_transpose", &out)?;
    let node = tape.node_for_output(input.is_tracked() || kernel.is_tracked(), out.len());
    if let Some(id) = node {
        let (in_node, k_node) = (input.node(), kernel.node());
        let (iv, kv) = (input.shared_values(), kernel.shared_values());
        tape.record(id, move |dout, grads| {
            if let Some(n) = in_node {
                // d_in gathers from dout exactly like a conv2d forward.
                let dinp = conv2d_forward(dout, &kv, &d);
                grads.accumulate(n, &dinp);
            }
            if let Some(n) = k_node {
                // d_k[co,c,u,v] = Σ in[b,co,sh,sw] · dout[b,c,sh·s+u-p,...]
                let mut dker = vec![0.0; kv.len()];
                for bi in 0..b {
                    for co in 0..cin {
                        for c in 0..kci {
                            for u in 0..kh {
                                let (lo_h, hi_h) = out_range(u, padding, stride, oh, h);
                                if lo_h > hi_h {
                                    continue;
                                }
                                for v in 0..kw {
                                    let (lo_w, hi_w) = out_range(v, padding, stride, ow, w);
                                    if lo_w > hi_w {
                                        continue;
                                    }
                                    let mut acc = 0.0;
                                    for sh in lo_h..=hi_h {
                                        let th = sh * stride + u - padding;
                                        let in_row = (bi * cin + co) * h * w + sh * w;
                                        let dout_row = (bi * kci + c) * oh * ow + th * ow;
                                        let mut tw = lo_w * stride + v - padding;
                                        for sw in lo_w..=hi_w {
                                            acc += iv[in_row + sw] * dout[dout_row + tw];
                                            tw += stride;
                                        }
                                    }
                                    dker[((co * kci + c) * kh + u) * kw + v] += acc;
                                }
                            }
                        }
                    }
                }
                grads.accumulate(n, &dker);
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![b, kci, oh, ow], node))
}
