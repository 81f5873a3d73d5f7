//! Dynamic motion filters.
//!
//! The network emits one row of `s²` logits per input frame. A per-row
//! softmax turns each row into a nonnegative `s×s` filter that sums to one,
//! and the filter for frame `t` is slid over frame `t` with clamp-to-edge
//! borders to produce the estimate of frame `t + 1`. Because every predicted
//! pixel is then a convex combination of source pixels, predictions stay
//! within the local range of the input.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax-normalized per-frame filters living on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct DynamicFilterBank {
    /// `T×s×s` filter taps.
    pub filters: Var,
    pub frames: usize,
    pub size: usize,
}

impl DynamicFilterBank {
    pub fn tensor<'g, S: Scalar>(&self, g: &'g Graph<S>) -> &'g Tensor<S> {
        g.value(self.filters)
    }
}

/// Integer square root of the tap count, if it is a perfect square.
fn side_of(taps: usize) -> Option<usize> {
    let s = (taps as f64).sqrt().round() as usize;
    (s * s == taps && s > 0).then_some(s)
}

impl<S: Scalar> Graph<S> {
    /// Turns `T×s²` logits into a [`DynamicFilterBank`] of `T` filters of size `s×s`.
    pub fn make_filters(&mut self, logits: Var) -> Result<DynamicFilterBank> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid("make_filters", format!("expected T×s² logits, got {shape:?}")));
        }
        let size = side_of(shape[1]).ok_or_else(|| {
            Error::invalid("make_filters", format!("tap count {} is not a perfect square", shape[1]))
        })?;
        let p = self.softmax(logits, 1)?;
        let filters = self.reshape(p, vec![shape[0], size, size])?;
        Ok(DynamicFilterBank {
            filters,
            frames: shape[0],
            size,
        })
    }

    /// Predicts frame `t + 1` from frame `t` for every `t` of a `T×H×W` clip.
    ///
    /// Outputs are clamped to their source neighborhood's range. The bank is
    /// a convex combination so this only removes rounding overshoot; the
    /// backward pass ignores it.
    pub fn apply_filters(&mut self, clip: Var, bank: &DynamicFilterBank) -> Result<Var> {
        let mut out = apply_filters_raw(self.value(clip), self.value(bank.filters))?;
        clamp_to_neighborhood(self.value(clip), bank.size, &mut out);
        self.push_apply_filters(clip, bank.filters, out)
    }

    /// Row-major concatenation of the filters in frame order, length `T·s²`.
    pub fn flatten_dmr_input(&mut self, bank: &DynamicFilterBank) -> Result<Var> {
        let n = bank.frames * bank.size * bank.size;
        self.reshape(bank.filters, vec![n])
    }
}

fn check_shapes(clip: &[usize], filters: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if clip.len() != 3 || filters.len() != 3 || filters[1] != filters[2] {
        return Err(Error::ShapeMismatch {
            op: "apply_filters",
            lhs: clip.to_vec(),
            rhs: filters.to_vec(),
        });
    }
    if clip[0] != filters[0] {
        return Err(Error::invalid(
            "apply_filters",
            format!("clip has {} frames but bank has {}", clip[0], filters[0]),
        ));
    }
    let s = filters[1];
    if s % 2 == 0 {
        return Err(Error::invalid("apply_filters", format!("filter size {s} must be odd")));
    }
    Ok((clip[0], clip[1], clip[2], s))
}

/// Clamped source offsets for every output coordinate and tap along one axis:
/// `table[o * s + i] = clamp(o + i - r, 0, n - 1)`.
fn clamp_table(n: usize, s: usize) -> Vec<usize> {
    let r = (s / 2) as isize;
    let mut table = Vec::with_capacity(n * s);
    for o in 0..n as isize {
        for i in 0..s as isize {
            table.push((o + i - r).clamp(0, n as isize - 1) as usize);
        }
    }
    table
}

fn clamp_to_neighborhood<S: Scalar>(clip: &Tensor<S>, s: usize, out: &mut Tensor<S>) {
    let (t, h, w) = (clip.shape()[0], clip.shape()[1], clip.shape()[2]);
    let (ys, xs) = (clamp_table(h, s), clamp_table(w, s));
    let cd = clip.data();
    let od = out.data_mut();
    for f in 0..t {
        let frame = &cd[f * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let mut lo = frame[ys[y * s] * w + xs[x * s]];
                let mut hi = lo;
                for i in 0..s {
                    let row = &frame[ys[y * s + i] * w..][..w];
                    for j in 0..s {
                        let v = row[xs[x * s + j]];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let o = &mut od[(f * h + y) * w + x];
                *o = o.max(lo).min(hi);
            }
        }
    }
}

/// `pred[t,y,x] = Σ_{i,j} f[t,i,j] · clip[t, clamp(y+i-r), clamp(x+j-r)]`,
/// taps summed in row-major order.
pub fn apply_filters_raw<S: Scalar>(clip: &Tensor<S>, filters: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, h, w, s) = check_shapes(clip.shape(), filters.shape())?;
    let (ys, xs) = (clamp_table(h, s), clamp_table(w, s));
    let (cd, fd) = (clip.data(), filters.data());
    let mut out = vec![S::zero(); t * h * w];
    for f in 0..t {
        let frame = &cd[f * h * w..][..h * w];
        let taps = &fd[f * s * s..][..s * s];
        for y in 0..h {
            for x in 0..w {
                let mut acc = S::zero();
                for i in 0..s {
                    let row = &frame[ys[y * s + i] * w..][..w];
                    for j in 0..s {
                        acc += taps[i * s + j] * row[xs[x * s + j]];
                    }
                }
                out[(f * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![t, h, w], out)
}

pub(crate) fn apply_filters_backward<S: Scalar>(
    clip: &Tensor<S>,
    filters: &Tensor<S>,
    dout: &[S],
    need_dclip: bool,
    need_dfilters: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (t, h, w, s) = (clip.shape()[0], clip.shape()[1], clip.shape()[2], filters.shape()[1]);
    let (ys, xs) = (clamp_table(h, s), clamp_table(w, s));
    let (cd, fd) = (clip.data(), filters.data());
    let mut dclip = need_dclip.then(|| vec![S::zero(); cd.len()]);
    let mut dfilt = need_dfilters.then(|| vec![S::zero(); fd.len()]);
    for f in 0..t {
        let frame = &cd[f * h * w..][..h * w];
        let taps = &fd[f * s * s..][..s * s];
        for y in 0..h {
            for x in 0..w {
                let d = dout[(f * h + y) * w + x];
                for i in 0..s {
                    let src_row = ys[y * s + i] * w;
                    for j in 0..s {
                        let src = src_row + xs[x * s + j];
                        if let Some(df) = dfilt.as_mut() {
                            df[f * s * s + i * s + j] += d * frame[src];
                        }
                        if let Some(dc) = dclip.as_mut() {
                            dc[f * h * w + src] += d * taps[i * s + j];
                        }
                    }
                }
            }
        }
    }
    (dclip, dfilt)
}
