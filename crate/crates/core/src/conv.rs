//! Raw 3D convolution and spatial pooling kernels.
//!
//! Layout: input `C×T×H×W`, kernels `C'×C×kt×kh×kw`, output `C'×T'×H'×W'`.
//! Cross-correlation convention (no kernel flip). Temporal stride is always 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Boundary handling for [`conv3d_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output keeps the input extents (up to stride); out-of-range reads clamp to the edge.
    SameReplicate,
    /// No padding; output shrinks by `k - 1` along every axis.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    c_in: usize,
    t: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    tp: usize,
    hp: usize,
    wp: usize,
    pad_t: usize,
    pad_h: usize,
    pad_w: usize,
    pub t_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn geometry(
    x: &[usize],
    k: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if x.len() != 4 || k.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        });
    }
    if k[1] != x[0] {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv3d", "spatial stride must be >= 1"));
    }
    let (c_in, t, h, w) = (x[0], x[1], x[2], x[3]);
    let (c_out, kt, kh, kw) = (k[0], k[2], k[3], k[4]);
    if kt == 0 || kh == 0 || kw == 0 || t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("conv3d", "zero extent"));
    }
    let (pad_t, pad_h, pad_w, tp, hp, wp) = match padding {
        Padding::SameReplicate => (
            (kt - 1) / 2,
            (kh - 1) / 2,
            (kw - 1) / 2,
            t + kt - 1,
            h + kh - 1,
            w + kw - 1,
        ),
        Padding::Valid => (0, 0, 0, t, h, w),
    };
    if kt > tp || kh > hp || kw > wp {
        return Err(Error::invalid(
            "conv3d",
            format!("kernel {kt}x{kh}x{kw} larger than padded input {tp}x{hp}x{wp}"),
        ));
    }
    Ok(ConvGeom {
        c_in,
        t,
        h,
        w,
        c_out,
        kt,
        kh,
        kw,
        stride,
        tp,
        hp,
        wp,
        pad_t,
        pad_h,
        pad_w,
        t_out: tp - kt + 1,
        h_out: (hp - kh) / stride + 1,
        w_out: (wp - kw) / stride + 1,
    })
}

#[inline]
fn clamp_index(i: usize, pad: usize, n: usize) -> usize {
    i.saturating_sub(pad).min(n - 1)
}

fn pad_input<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    if g.tp == g.t && g.hp == g.h && g.wp == g.w {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(g.c_in * g.tp * g.hp * g.wp);
    for c in 0..g.c_in {
        for tp in 0..g.tp {
            let ts = clamp_index(tp, g.pad_t, g.t);
            for yp in 0..g.hp {
                let ys = clamp_index(yp, g.pad_h, g.h);
                let row = &x[((c * g.t + ts) * g.h + ys) * g.w..][..g.w];
                for xp in 0..g.wp {
                    out.push(row[clamp_index(xp, g.pad_w, g.w)]);
                }
            }
        }
    }
    out
}

/// Folds a gradient w.r.t. the padded input back onto the clamped source pixels.
fn unpad_grad<S: Scalar>(dp: &[S], g: &ConvGeom) -> Vec<S> {
    if g.tp == g.t && g.hp == g.h && g.wp == g.w {
        return dp.to_vec();
    }
    let mut dx = vec![S::zero(); g.c_in * g.t * g.h * g.w];
    for c in 0..g.c_in {
        for tp in 0..g.tp {
            let ts = clamp_index(tp, g.pad_t, g.t);
            for yp in 0..g.hp {
                let ys = clamp_index(yp, g.pad_h, g.h);
                let src = &dp[((c * g.tp + tp) * g.hp + yp) * g.wp..][..g.wp];
                let dst = &mut dx[((c * g.t + ts) * g.h + ys) * g.w..][..g.w];
                for (xp, &v) in src.iter().enumerate() {
                    dst[clamp_index(xp, g.pad_w, g.w)] += v;
                }
            }
        }
    }
    dx
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight fixed partial sums (deterministic, vectorizable).
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let mut acc = [S::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub(crate) fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<S>> {
    let g = geometry(x.shape(), k.shape(), stride, padding)?;
    let p = pad_input(x.data(), &g);
    let kd = k.data();
    let mut out = vec![S::zero(); g.c_out * g.t_out * g.h_out * g.w_out];
    for co in 0..g.c_out {
        let out_c = &mut out[co * g.t_out * g.h_out * g.w_out..][..g.t_out * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            for dt in 0..g.kt {
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let wv = kd[(((co * g.c_in + ci) * g.kt + dt) * g.kh + dy) * g.kw + dx];
                        if wv == S::zero() {
                            continue;
                        }
                        for to in 0..g.t_out {
                            for yo in 0..g.h_out {
                                let base = ((ci * g.tp + to + dt) * g.hp + yo * g.stride + dy) * g.wp + dx;
                                let out_row = &mut out_c[(to * g.h_out + yo) * g.w_out..][..g.w_out];
                                if g.stride == 1 {
                                    axpy(wv, &p[base..base + g.w_out], out_row);
                                } else {
                                    for (xo, o) in out_row.iter_mut().enumerate() {
                                        *o += wv * p[base + xo * g.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.t_out, g.h_out, g.w_out], out)
}

/// Returns `(d_input, d_kernels)`; either side is skipped when not requested.
pub(crate) fn conv3d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    dout: &[S],
    stride: usize,
    padding: Padding,
    need_dx: bool,
    need_dk: bool,
) -> Result<(Option<Vec<S>>, Option<Vec<S>>)> {
    let g = geometry(x.shape(), k.shape(), stride, padding)?;
    let p = pad_input(x.data(), &g);
    let kd = k.data();
    let mut dp = if need_dx {
        vec![S::zero(); p.len()]
    } else {
        Vec::new()
    };
    let mut dk = if need_dk {
        vec![S::zero(); kd.len()]
    } else {
        Vec::new()
    };
    let plane = g.t_out * g.h_out * g.w_out;
    let mut strided = vec![S::zero(); g.w_out];
    for co in 0..g.c_out {
        let dout_c = &dout[co * plane..][..plane];
        for ci in 0..g.c_in {
            for dt in 0..g.kt {
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let kidx = (((co * g.c_in + ci) * g.kt + dt) * g.kh + dy) * g.kw + dx;
                        let wv = kd[kidx];
                        let mut acc = S::zero();
                        for to in 0..g.t_out {
                            for yo in 0..g.h_out {
                                let base = ((ci * g.tp + to + dt) * g.hp + yo * g.stride + dy) * g.wp + dx;
                                let drow = &dout_c[(to * g.h_out + yo) * g.w_out..][..g.w_out];
                                if g.stride == 1 {
                                    if need_dk {
                                        acc += dot(drow, &p[base..base + g.w_out]);
                                    }
                                    if need_dx {
                                        axpy(wv, drow, &mut dp[base..base + g.w_out]);
                                    }
                                } else {
                                    if need_dk {
                                        for (xo, s) in strided.iter_mut().enumerate() {
                                            *s = p[base + xo * g.stride];
                                        }
                                        acc += dot(drow, &strided);
                                    }
                                    if need_dx {
                                        for (xo, &d) in drow.iter().enumerate() {
                                            dp[base + xo * g.stride] += wv * d;
                                        }
                                    }
                                }
                            }
                        }
                        if need_dk {
                            dk[kidx] = acc;
                        }
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| unpad_grad(&dp, &g));
    Ok((dx, need_dk.then_some(dk)))
}

/// Non-overlapping `k×k` average pooling over the last two axes (floor sizing).
pub(crate) fn avg_pool_forward<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let shape = x.shape();
    if shape.len() < 2 || k == 0 {
        return Err(Error::invalid("avg_pool", format!("bad shape {shape:?} / window {k}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < k || w < k {
        return Err(Error::invalid("avg_pool", format!("window {k} larger than {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let norm = S::one() / S::lit((k * k) as f64);
    let xd = x.data();
    let mut out = vec![S::zero(); planes * ho * wo];
    for pl in 0..planes {
        for yo in 0..ho {
            for xo in 0..wo {
                let mut s = S::zero();
                for dy in 0..k {
                    let row = &xd[(pl * h + yo * k + dy) * w + xo * k..][..k];
                    for &v in row {
                        s += v;
                    }
                }
                out[(pl * ho + yo) * wo + xo] = s * norm;
            }
        }
    }
    let mut oshape = shape.to_vec();
    let r = oshape.len();
    oshape[r - 2] = ho;
    oshape[r - 1] = wo;
    Tensor::new(oshape, out)
}

pub(crate) fn avg_pool_backward<S: Scalar>(in_shape: &[usize], k: usize, dout: &[S]) -> Vec<S> {
    let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
    let (ho, wo) = (h / k, w / k);
    let planes: usize = in_shape[..in_shape.len() - 2].iter().product();
    let norm = S::one() / S::lit((k * k) as f64);
    let mut dx = vec![S::zero(); planes * h * w];
    for pl in 0..planes {
        for yo in 0..ho {
            for xo in 0..wo {
                let g = dout[(pl * ho + yo) * wo + xo] * norm;
                for dy in 0..k {
                    for v in &mut dx[(pl * h + yo * k + dy) * w + xo * k..][..k] {
                        *v = g;
                    }
                }
            }
        }
    }
    dx
}
