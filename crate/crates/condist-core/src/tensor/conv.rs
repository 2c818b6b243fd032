//! 2D convolution and nearest-neighbour upsampling.
//!
//! The inner loops run over contiguous output rows so the compiler can
//! vectorize them; padding is handled by clamping the valid output range per
//! kernel offset instead of branching per element.

use alloc::format;
use alloc::vec;

use super::{make_output, numel, Op, Padding, Real, Tensor, TensorInner};
use crate::error::{Error, Result};

fn dims4<F: Real>(t: &Tensor<F>, what: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch { op: what, lhs: s.to_vec(), rhs: vec![4] });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Valid output positions `o` in `[lo, hi)` such that
/// `0 <= o*stride + k_off - pad < extent_in`.
fn valid_range(
    extent_out: usize,
    extent_in: usize,
    k_off: usize,
    pad: usize,
    stride: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let max_pos = extent_in as isize - 1 + pad as isize - k_off as isize;
    if max_pos < 0 {
        return (0, 0);
    }
    let hi = core::cmp::min(extent_out, max_pos as usize / stride + 1);
    (lo, hi.max(lo))
}

/// 2D convolution of `input[B, Cin, H, W]` with `kernel[Cout, Cin, kh, kw]`
/// and an optional per-channel bias. Output extent per axis is
/// `(extent + 2*pad - k) / stride + 1`.
pub fn conv2d<F: Real>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<F>> {
    let (b, c_in, h, w) = dims4(input, "conv2d input")?;
    let (c_out, kc_in, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if kc_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::BadConvGeometry(format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::BadConvGeometry("stride must be positive".into()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: bt.shape().to_vec(),
                rhs: vec![c_out],
            });
        }
    }
    let (pad_h, pad_w) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    let oh = out_extent(h, pad_h, kh, stride)?;
    let ow = out_extent(w, pad_w, kw, stride)?;

    let xd = input.data();
    let kd = kernel.data();
    let mut out = vec![F::zero(); b * c_out * oh * ow];
    for bi in 0..b {
        for co in 0..c_out {
            let oplane = &mut out[(bi * c_out + co) * oh * ow..][..oh * ow];
            if let Some(bt) = bias {
                oplane.fill(bt.data()[co]);
            }
            for ci in 0..c_in {
                let xplane = &xd[(bi * c_in + ci) * h * w..][..h * w];
                let kplane = &kd[(co * c_in + ci) * kh * kw..][..kh * kw];
                accumulate_plane(oplane, xplane, kplane, h, w, oh, ow, kh, kw, pad_h, pad_w, stride);
            }
        }
    }

    let op = Op::Conv2d { stride, pad_h, pad_w };
    let shape = vec![b, c_out, oh, ow];
    match bias {
        Some(bt) => make_output(&[input, kernel, bt], op, shape, out),
        None => make_output(&[input, kernel], op, shape, out),
    }
}

fn out_extent(extent: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::BadConvGeometry(format!(
            "input extent {extent} with padding {pad} smaller than kernel {k}"
        )));
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::BadConvGeometry(format!(
            "non-positive output extent for input {extent}, kernel {k}, stride {stride}"
        )));
    }
    Ok(out)
}

/// out[oh, ow] += k[khi, kwi] * x[oh*s + khi - ph, ow*s + kwi - pw] over the
/// valid range, one kernel tap at a time.
#[allow(clippy::too_many_arguments)]
fn accumulate_plane<F: Real>(
    oplane: &mut [F],
    xplane: &[F],
    kplane: &[F],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
) {
    for khi in 0..kh {
        let (oh_lo, oh_hi) = valid_range(oh, h, khi, pad_h, stride);
        for kwi in 0..kw {
            let kv = kplane[khi * kw + kwi];
            let (ow_lo, ow_hi) = valid_range(ow, w, kwi, pad_w, stride);
            if ow_lo >= ow_hi {
                continue;
            }
            for ohi in oh_lo..oh_hi {
                let ih = ohi * stride + khi - pad_h;
                let iw0 = ow_lo * stride + kwi - pad_w;
                let orow = &mut oplane[ohi * ow + ow_lo..ohi * ow + ow_hi];
                if stride == 1 {
                    let xrow = &xplane[ih * w + iw0..][..orow.len()];
                    for (o, &x) in orow.iter_mut().zip(xrow) {
                        *o = *o + kv * x;
                    }
                } else {
                    let mut idx = ih * w + iw0;
                    for o in orow.iter_mut() {
                        *o = *o + kv * xplane[idx];
                        idx += stride;
                    }
                }
            }
        }
    }
}

/// Accumulate conv gradients w.r.t. input, kernel, and bias.
pub(crate) fn conv2d_backward<F: Real>(
    x: &TensorInner<F>,
    k: &TensorInner<F>,
    bias: Option<&alloc::rc::Rc<TensorInner<F>>>,
    gout: &[F],
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) {
    let (b, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (c_out, _, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    let hw_out = gout.len() / (b * c_out);
    // Recover output extents from the forward geometry.
    let oh = (h + 2 * pad_h - kh) / stride + 1;
    let ow = (w + 2 * pad_w - kw) / stride + 1;
    debug_assert_eq!(oh * ow, hw_out);

    if x.requires_grad {
        let mut gx = x.grad_buffer();
        for bi in 0..b {
            for co in 0..c_out {
                let gplane = &gout[(bi * c_out + co) * oh * ow..][..oh * ow];
                for ci in 0..c_in {
                    let gxplane = &mut gx[(bi * c_in + ci) * h * w..][..h * w];
                    let kplane = &k.data[(co * c_in + ci) * kh * kw..][..kh * kw];
                    scatter_plane(gxplane, gplane, kplane, h, w, oh, ow, kh, kw, pad_h, pad_w, stride);
                }
            }
        }
    }

    if k.requires_grad {
        let mut gk = k.grad_buffer();
        for co in 0..c_out {
            for ci in 0..c_in {
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(oh, h, khi, pad_h, stride);
                    for kwi in 0..kw {
                        let (ow_lo, ow_hi) = valid_range(ow, w, kwi, pad_w, stride);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = F::zero();
                        for bi in 0..b {
                            let gplane = &gout[(bi * c_out + co) * oh * ow..][..oh * ow];
                            let xplane = &x.data[(bi * c_in + ci) * h * w..][..h * w];
                            for ohi in oh_lo..oh_hi {
                                let ih = ohi * stride + khi - pad_h;
                                let iw0 = ow_lo * stride + kwi - pad_w;
                                let grow = &gplane[ohi * ow + ow_lo..ohi * ow + ow_hi];
                                if stride == 1 {
                                    let xrow = &xplane[ih * w + iw0..][..grow.len()];
                                    for (&g, &xv) in grow.iter().zip(xrow) {
                                        acc = acc + g * xv;
                                    }
                                } else {
                                    let mut idx = ih * w + iw0;
                                    for &g in grow {
                                        acc = acc + g * xplane[idx];
                                        idx += stride;
                                    }
                                }
                            }
                        }
                        gk[(co * c_in + ci) * kh * kw + khi * kw + kwi] += acc;
                    }
                }
            }
        }
    }

    if let Some(bt) = bias {
        if bt.requires_grad {
            let mut gb = bt.grad_buffer();
            for bi in 0..b {
                for co in 0..c_out {
                    let gplane = &gout[(bi * c_out + co) * oh * ow..][..oh * ow];
                    let mut acc = 0.0f64;
                    for &g in gplane {
                        acc += g.to_f64().unwrap_or(f64::NAN);
                    }
                    gb[co] += super::real(acc);
                }
            }
        }
    }
}

/// gx[ih, iw] += k[khi, kwi] * gout[oh, ow] — the transposed scatter of
/// `accumulate_plane`.
#[allow(clippy::too_many_arguments)]
fn scatter_plane<F: Real>(
    gxplane: &mut [F],
    gplane: &[F],
    kplane: &[F],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
) {
    for khi in 0..kh {
        let (oh_lo, oh_hi) = valid_range(oh, h, khi, pad_h, stride);
        for kwi in 0..kw {
            let kv = kplane[khi * kw + kwi];
            let (ow_lo, ow_hi) = valid_range(ow, w, kwi, pad_w, stride);
            if ow_lo >= ow_hi {
                continue;
            }
            for ohi in oh_lo..oh_hi {
                let ih = ohi * stride + khi - pad_h;
                let iw0 = ow_lo * stride + kwi - pad_w;
                let grow = &gplane[ohi * ow + ow_lo..ohi * ow + ow_hi];
                if stride == 1 {
                    let gxrow = &mut gxplane[ih * w + iw0..][..grow.len()];
                    for (gx, &g) in gxrow.iter_mut().zip(grow) {
                        *gx += kv * g;
                    }
                } else {
                    let mut idx = ih * w + iw0;
                    for &g in grow {
                        gxplane[idx] += kv * g;
                        idx += stride;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of `[B, C, H, W]` to `[B, C, 2H, 2W]`.
pub fn upsample2x<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, c, h, w) = dims4(input, "upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = input.data();
    let mut out = vec![F::zero(); numel(&[b, c, oh, ow])];
    for plane in 0..b * c {
        let xplane = &xd[plane * h * w..][..h * w];
        let oplane = &mut out[plane * oh * ow..][..oh * ow];
        for hh in 0..h {
            for ww in 0..w {
                let v = xplane[hh * w + ww];
                let top = 2 * hh * ow + 2 * ww;
                let bot = (2 * hh + 1) * ow + 2 * ww;
                oplane[top] = v;
                oplane[top + 1] = v;
                oplane[bot] = v;
                oplane[bot + 1] = v;
            }
        }
    }
    make_output(&[input], Op::Upsample2x, vec![b, c, oh, ow], out)
}
