//! Forward and backward kernels over raw slices. All spatial maps are `[C, H, W]`.

use crate::tensor::Real;

#[inline]
fn span(len: usize, offset: isize) -> (usize, usize) {
    // Output positions `o` with `0 <= o + offset < len`.
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi = if offset > 0 {
        len.saturating_sub(offset as usize)
    } else {
        len
    };
    (lo.min(len), hi)
}

/// Same-padded stride-1 convolution (cross-correlation) with a square odd kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Real>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    co: usize,
    ks: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = h * w;
    let pad = (ks / 2) as isize;
    let mut out = vec![T::zero(); co * hw];
    for o in 0..co {
        let out_plane = &mut out[o * hw..(o + 1) * hw];
        if let Some(b) = bias {
            out_plane.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..ci {
            let in_plane = &x[i * hw..(i + 1) * hw];
            for ky in 0..ks {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..ks {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = kernel[((o * ci + i) * ks + ky) * ks + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_plane[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Real>(
    dout: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    co: usize,
    ks: usize,
) -> Vec<T> {
    let hw = h * w;
    let pad = (ks / 2) as isize;
    let mut dx = vec![T::zero(); ci * hw];
    for o in 0..co {
        let g_plane = &dout[o * hw..(o + 1) * hw];
        for i in 0..ci {
            let dx_plane = &mut dx[i * hw..(i + 1) * hw];
            for ky in 0..ks {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..ks {
                    let ddx = kx as isize - pad;
                    let (x0, x1) = span(w, ddx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = kernel[((o * ci + i) * ks + ky) * ks + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let start = sy * w + (x0 as isize + ddx) as usize;
                        let dst = &mut dx_plane[start..start + (x1 - x0)];
                        let src = &g_plane[y * w + x0..y * w + x1];
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d += wv * g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_grad_params<T: Real>(
    dout: &[T],
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ks: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let pad = (ks / 2) as isize;
    let mut dk = vec![T::zero(); co * ci * ks * ks];
    let mut db = vec![T::zero(); co];
    for o in 0..co {
        let g_plane = &dout[o * hw..(o + 1) * hw];
        db[o] = g_plane.iter().copied().sum();
        for i in 0..ci {
            let in_plane = &x[i * hw..(i + 1) * hw];
            for ky in 0..ks {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..ks {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let mut acc = T::zero();
                    if x0 < x1 {
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            let g = &g_plane[y * w + x0..y * w + x1];
                            acc += g.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    dk[((o * ci + i) * ks + ky) * ks + kx] = acc;
                }
            }
        }
    }
    (dk, db)
}

pub fn avg_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..];
            let r1 = &src[(2 * y + 1) * w..];
            for xx in 0..ow {
                dst[y * ow + xx] =
                    (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_grad<T: Real>(dout: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[y * ow + xx] * quarter;
                d[2 * y * w + 2 * xx] = v;
                d[2 * y * w + 2 * xx + 1] = v;
                d[(2 * y + 1) * w + 2 * xx] = v;
                d[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    dx
}

/// Interpolation taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

impl AxisPlan {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut plan = Self {
            i0: Vec::with_capacity(dst),
            i1: Vec::with_capacity(dst),
            w1: Vec::with_capacity(dst),
        };
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = if i0 + 1 < src { i0 + 1 } else { i0 };
            plan.i0.push(i0);
            plan.i1.push(i1);
            plan.w1.push(if i1 == i0 { 0.0 } else { s - i0 as f64 });
        }
        plan
    }
}

pub fn resize_bilinear<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    rows: &AxisPlan,
    cols: &AxisPlan,
) -> Vec<T> {
    let (oh, ow) = (rows.i0.len(), cols.i0.len());
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let wy1 = T::lit(rows.w1[oy]);
            let wy0 = T::one() - wy1;
            let r0 = &src[rows.i0[oy] * w..];
            let r1 = &src[rows.i1[oy] * w..];
            for ox in 0..ow {
                let wx1 = T::lit(cols.w1[ox]);
                let wx0 = T::one() - wx1;
                let (a, b) = (cols.i0[ox], cols.i1[ox]);
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[a] + wx1 * r0[b]) + wy1 * (wx0 * r1[a] + wx1 * r1[b]);
            }
        }
    }
    out
}

pub fn resize_bilinear_grad<T: Real>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    rows: &AxisPlan,
    cols: &AxisPlan,
) -> Vec<T> {
    let (oh, ow) = (rows.i0.len(), cols.i0.len());
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let wy1 = T::lit(rows.w1[oy]);
            let wy0 = T::one() - wy1;
            let (r0, r1) = (rows.i0[oy] * w, rows.i1[oy] * w);
            for ox in 0..ow {
                let wx1 = T::lit(cols.w1[ox]);
                let wx0 = T::one() - wx1;
                let (a, b) = (cols.i0[ox], cols.i1[ox]);
                let v = g[oy * ow + ox];
                d[r0 + a] += wy0 * wx0 * v;
                d[r0 + b] += wy0 * wx1 * v;
                d[r1 + a] += wy1 * wx0 * v;
                d[r1 + b] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

/// Copies the window `[y0, y0+ch) x [x0, x0+cw)` out of every channel.
#[allow(clippy::too_many_arguments)]
pub fn crop<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y0 + ch {
            let row = &x[k * h * w + y * w..];
            out.extend_from_slice(&row[x0..x0 + cw]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn crop_grad<T: Real>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    for k in 0..c {
        for y in 0..ch {
            let dst = &mut dx[k * h * w + (y0 + y) * w + x0..][..cw];
            dst.copy_from_slice(&dout[(k * ch + y) * cw..][..cw]);
        }
    }
    dx
}

/// Per-pixel softmax over channels.
pub fn softmax_channels<T: Real>(x: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * plane];
    for p in 0..plane {
        let mut m = x[p];
        for k in 1..c {
            m = m.max(x[k * plane + p]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (x[k * plane + p] - m).exp();
            out[k * plane + p] = e;
            s += e;
        }
        for k in 0..c {
            out[k * plane + p] = out[k * plane + p] / s;
        }
    }
    out
}

pub fn softmax_channels_grad<T: Real>(probs: &[T], dout: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); c * plane];
    for p in 0..plane {
        let mut dot = T::zero();
        for k in 0..c {
            dot += probs[k * plane + p] * dout[k * plane + p];
        }
        for k in 0..c {
            let i = k * plane + p;
            dx[i] = probs[i] * (dout[i] - dot);
        }
    }
    dx
}

/// Summed negative log-likelihood of `labels` under the channel softmax of `logits`,
/// skipping pixels whose label equals `ignore`. Returns the sum and the softmax.
pub fn nll_sum<T: Real>(
    logits: &[T],
    c: usize,
    plane: usize,
    labels: &[u16],
    ignore: u16,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); c * plane];
    let mut total = T::zero();
    for p in 0..plane {
        let mut m = logits[p];
        let mut arg = 0;
        for k in 1..c {
            let v = logits[k * plane + p];
            if v > m {
                m = v;
                arg = k;
            }
        }
        let mut others = T::zero();
        for k in 0..c {
            let e = (logits[k * plane + p] - m).exp();
            probs[k * plane + p] = e;
            if k != arg {
                others += e;
            }
        }
        let s = T::one() + others;
        for k in 0..c {
            probs[k * plane + p] = probs[k * plane + p] / s;
        }
        let y = labels[p];
        if y != ignore {
            // log-sum-exp minus the true logit, with log1p for accuracy near certainty
            total += (m - logits[y as usize * plane + p]) + others.ln_1p();
        }
    }
    (total, probs)
}

/// `y = W x + b` with `W` of shape `[out, in]`.
pub fn linear<T: Real>(x: &[T], weight: &[T], bias: &[T], n_out: usize) -> Vec<T> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            bias[o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
        })
        .collect()
}
