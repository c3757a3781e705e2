//! Raw compute kernels: plain slices in, `Vec` out, no tape involvement.
//! Everything here is sequential and allocation-order deterministic; the
//! autodiff layer in `tensor::mod` owns all bookkeeping.

use crate::element::{gemm_a_bt_acc, gemm_at_b, gemm_rowmajor, Element};
use crate::shape::Shape;

// ---------------------------------------------------------------------------
// broadcast elementwise
// ---------------------------------------------------------------------------

/// Elementwise binary op with singleton-extent broadcasting. `out_shape`
/// must be the precomputed broadcast shape of the two inputs.
pub fn bin_broadcast<T: Element>(
    a: &[T],
    a_shape: &Shape,
    b: &[T],
    b_shape: &Shape,
    out_shape: &Shape,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let c = b[0];
        return a.iter().map(|&x| f(x, c)).collect();
    }
    if a.len() == 1 {
        let c = a[0];
        return b.iter().map(|&y| f(c, y)).collect();
    }
    let mut out = vec![T::zero(); out_shape.numel()];
    let rank = out_shape.rank();
    let a_strides = stride_or_zero(a_shape, out_shape);
    let b_strides = stride_or_zero(b_shape, out_shape);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for o in out.iter_mut() {
        *o = f(a[ao], b[bo]);
        // odometer increment, innermost dimension fastest
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += a_strides[d];
            bo += b_strides[d];
            if idx[d] < out_shape.dims()[d] {
                break;
            }
            idx[d] = 0;
            ao -= a_strides[d] * out_shape.dims()[d];
            bo -= b_strides[d] * out_shape.dims()[d];
        }
    }
    out
}

/// Per-dimension step for walking `shape` along `out_shape`'s index space:
/// zero where `shape` has a singleton that `out_shape` expands.
fn stride_or_zero(shape: &Shape, out_shape: &Shape) -> Vec<usize> {
    let natural = shape.strides();
    shape
        .dims()
        .iter()
        .zip(out_shape.dims())
        .zip(natural)
        .map(|((&d, &od), s)| if d == 1 && od > 1 { 0 } else { s })
        .collect()
}

/// Accumulate `g` (shaped `g_shape`) into `out` (shaped `target`), summing
/// over every dimension where `target` has a singleton `g_shape` expands.
/// The adjoint of broadcasting.
pub fn reduce_into<T: Element>(g: &[T], g_shape: &Shape, target: &Shape, out: &mut [T]) {
    if g_shape == target {
        for (o, &v) in out.iter_mut().zip(g) {
            *o = *o + v;
        }
        return;
    }
    if out.len() == 1 {
        let mut acc = T::zero();
        for &v in g {
            acc = acc + v;
        }
        out[0] = out[0] + acc;
        return;
    }
    let rank = g_shape.rank();
    let t_strides = stride_or_zero(target, g_shape);
    let mut idx = vec![0usize; rank];
    let mut to = 0usize;
    for &v in g {
        out[to] = out[to] + v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            to += t_strides[d];
            if idx[d] < g_shape.dims()[d] {
                break;
            }
            idx[d] = 0;
            to -= t_strides[d] * g_shape.dims()[d];
        }
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Element>(a: &[T]) -> T {
    let mut acc = T::zero();
    for &v in a {
        acc = acc + v;
    }
    acc
}

/// (n, c, h, w) -> (n, c, 1, 1) mean over the spatial plane.
pub fn spatial_mean<T: Element>(a: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut out = Vec::with_capacity(n * c);
    for p in 0..n * c {
        out.push(sum_all(&a[p * plane..(p + 1) * plane]) * inv);
    }
    out
}

pub fn spatial_mean_bwd<T: Element>(g: &[T], h: usize, w: usize, dx: &mut [T]) {
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    for (p, &gv) in g.iter().enumerate() {
        let gs = gv * inv;
        for v in &mut dx[p * plane..(p + 1) * plane] {
            *v = *v + gs;
        }
    }
}

// ---------------------------------------------------------------------------
// narrow / concat
// ---------------------------------------------------------------------------

fn split_dims(shape: &Shape, dim: usize) -> (usize, usize, usize) {
    let dims = shape.dims();
    let outer: usize = dims[..dim].iter().product();
    let mid = dims[dim];
    let inner: usize = dims[dim + 1..].iter().product();
    (outer, mid, inner)
}

pub fn narrow<T: Element>(a: &[T], shape: &Shape, dim: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, mid, inner) = split_dims(shape, dim);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * mid + start) * inner;
        out.extend_from_slice(&a[base..base + len * inner]);
    }
    out
}

pub fn narrow_bwd<T: Element>(
    g: &[T],
    shape: &Shape,
    dim: usize,
    start: usize,
    len: usize,
    dx: &mut [T],
) {
    let (outer, mid, inner) = split_dims(shape, dim);
    for o in 0..outer {
        let base = (o * mid + start) * inner;
        let gb = o * len * inner;
        for i in 0..len * inner {
            dx[base + i] = dx[base + i] + g[gb + i];
        }
    }
}

pub fn concat<T: Element>(a: &[T], a_shape: &Shape, b: &[T], b_shape: &Shape, dim: usize) -> Vec<T> {
    let (outer, mid_a, inner) = split_dims(a_shape, dim);
    let mid_b = b_shape.dims()[dim];
    let mut out = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        out.extend_from_slice(&a[o * mid_a * inner..(o + 1) * mid_a * inner]);
        out.extend_from_slice(&b[o * mid_b * inner..(o + 1) * mid_b * inner]);
    }
    out
}

pub fn concat_bwd<T: Element>(
    g: &[T],
    a_shape: &Shape,
    b_shape: &Shape,
    dim: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (outer, mid_a, inner) = split_dims(a_shape, dim);
    let mid_b = b_shape.dims()[dim];
    let row = (mid_a + mid_b) * inner;
    if let Some(da) = da {
        for o in 0..outer {
            let gb = o * row;
            for i in 0..mid_a * inner {
                da[o * mid_a * inner + i] = da[o * mid_a * inner + i] + g[gb + i];
            }
        }
    }
    if let Some(db) = db {
        for o in 0..outer {
            let gb = o * row + mid_a * inner;
            for i in 0..mid_b * inner {
                db[o * mid_b * inner + i] = db[o * mid_b * inner + i] + g[gb + i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// edge padding (replication, right/bottom only — used to even out extents
// before pooling)
// ---------------------------------------------------------------------------

pub fn pad_edge<T: Element>(
    a: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    right: usize,
    bottom: usize,
) -> Vec<T> {
    let (ho, wo) = (h + bottom, w + right);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &a[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let si = i.min(h - 1);
            let row = &plane[si * w..(si + 1) * w];
            out.extend_from_slice(row);
            for _ in 0..right {
                out.push(row[w - 1]);
            }
        }
    }
    out
}

pub fn pad_edge_bwd<T: Element>(
    g: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    right: usize,
    bottom: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h + bottom, w + right);
    for p in 0..n * c {
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let si = i.min(h - 1);
            for j in 0..wo {
                let sj = j.min(w - 1);
                dp[si * w + sj] = dp[si * w + sj] + gp[i * wo + j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

pub fn conv_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Column matrix layout: rows indexed by (ci, kh, kw), columns by (oh, ow).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let zero = T::zero();
    for ci in 0..cin {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let dst_base = r * ho * wo;
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let dst = &mut col[dst_base + oh * wo..dst_base + (oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(zero);
                        continue;
                    }
                    let row = &xp[ih as usize * w..(ih as usize + 1) * w];
                    if stride == 1 {
                        // iw = ow + kw - pad; valid ow range is contiguous
                        let lo = pad.saturating_sub(kw);
                        let hi = (w + pad - kw).min(wo);
                        dst[..lo.min(wo)].fill(zero);
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(&row[lo + kw - pad..hi + kw - pad]);
                        }
                        if hi < wo {
                            dst[hi..].fill(zero);
                        }
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            *d = if iw < 0 || iw >= w as isize {
                                zero
                            } else {
                                row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back into an image plane; adjoint of `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    for ci in 0..cin {
        let dp = &mut dx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let src_base = r * ho * wo;
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &col[src_base + oh * wo..src_base + (oh + 1) * wo];
                    let drow = &mut dp[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            drow[iw as usize] = drow[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is (n, cin, h, w), `wgt` is (cout, cin, k, k)
/// row-major, `bias` is (cout). Returns (n, cout, ho, wo).
pub fn conv2d_fwd<T: Element>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let ckk = cin * k * k;
    let ow_plane = ho * wo;
    let mut out = vec![T::zero(); n * cout * ow_plane];
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * ow_plane] };
    for b in 0..n {
        let xs = &x[b * cin * h * w..(b + 1) * cin * h * w];
        let os = &mut out[b * cout * ow_plane..(b + 1) * cout * ow_plane];
        if direct {
            gemm_rowmajor(cout, ckk, ow_plane, wgt, xs, os);
        } else {
            im2col(xs, cin, h, w, k, stride, pad, ho, wo, &mut col);
            gemm_rowmajor(cout, ckk, ow_plane, wgt, &col, os);
        }
        for co in 0..cout {
            let bv = bias[co];
            for v in &mut os[co * ow_plane..(co + 1) * ow_plane] {
                *v = *v + bv;
            }
        }
    }
    out
}

/// Backward convolution; any of the three adjoints can be requested.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_bwd<T: Element>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    g_out: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let ckk = cin * k * k;
    let ow_plane = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;

    let mut dx = need_dx.then(|| vec![T::zero(); n * cin * h * w]);
    let mut dw = need_dw.then(|| vec![T::zero(); cout * ckk]);
    let mut db = need_db.then(|| vec![T::zero(); cout]);

    let mut col = if (need_dw || need_dx) && !direct {
        vec![T::zero(); ckk * ow_plane]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let gs = &g_out[b * cout * ow_plane..(b + 1) * cout * ow_plane];
        let xs = &x[b * cin * h * w..(b + 1) * cin * h * w];
        if let Some(db) = db.as_deref_mut() {
            for co in 0..cout {
                db[co] = db[co] + sum_all(&gs[co * ow_plane..(co + 1) * ow_plane]);
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            if direct {
                gemm_a_bt_acc(cout, ow_plane, ckk, gs, xs, dw);
            } else {
                im2col(xs, cin, h, w, k, stride, pad, ho, wo, &mut col);
                gemm_a_bt_acc(cout, ow_plane, ckk, gs, &col, dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let ds = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
            if direct {
                gemm_at_b(ckk, cout, ow_plane, wgt, gs, ds);
            } else {
                gemm_at_b(ckk, cout, ow_plane, wgt, gs, &mut col);
                col2im_add(&col, cin, h, w, k, stride, pad, ho, wo, ds);
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

/// 2x2 stride-2 max pool; returns the pooled values and the flat index of
/// each window's maximum (first occurrence wins ties).
pub fn maxpool2_fwd<T: Element>(
    a: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let i0 = base + (2 * oh) * w + 2 * ow;
                let idxs = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = idxs[0];
                for &i in &idxs[1..] {
                    if a[i] > a[best] {
                        best = i;
                    }
                }
                out.push(a[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_bwd<T: Element>(g: &[T], arg: &[u32], dx: &mut [T]) {
    for (&gv, &i) in g.iter().zip(arg) {
        dx[i as usize] = dx[i as usize] + gv;
    }
}

/// Smallest (max − runner-up) gap over all pooling windows: how far the
/// input is from an argmax tie (0 on an exact tie).
pub fn maxpool2_tie_gap<T: Element>(a: &[T], n: usize, c: usize, h: usize, w: usize) -> T {
    let (ho, wo) = (h / 2, w / 2);
    let mut gap = T::infinity();
    for p in 0..n * c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let i0 = base + (2 * oh) * w + 2 * ow;
                let idxs = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut hi = T::neg_infinity();
                let mut second = T::neg_infinity();
                for &i in &idxs {
                    let v = a[i];
                    if v > hi {
                        second = hi;
                        hi = v;
                    } else if v > second {
                        second = v;
                    }
                }
                let g = hi - second;
                if g < gap {
                    gap = g;
                }
            }
        }
    }
    gap
}

pub fn avgpool2_fwd<T: Element>(a: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let i0 = base + (2 * oh) * w + 2 * ow;
                out.push((a[i0] + a[i0 + 1] + a[i0 + w] + a[i0 + w + 1]) * q);
            }
        }
    }
    out
}

pub fn avgpool2_bwd<T: Element>(g: &[T], n: usize, c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    for p in 0..n * c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let gv = g[p * ho * wo + oh * wo + ow] * q;
                let i0 = base + (2 * oh) * w + 2 * ow;
                dx[i0] = dx[i0] + gv;
                dx[i0 + 1] = dx[i0 + 1] + gv;
                dx[i0 + w] = dx[i0 + w] + gv;
                dx[i0 + w + 1] = dx[i0 + w + 1] + gv;
            }
        }
    }
}

/// Interpolation taps for doubling one axis with align-corners-false
/// semantics: source coordinate of output `o` is `o/2 - 0.25`, clamped.
fn up2_taps(len_in: usize) -> Vec<(usize, usize, f64)> {
    // (lo index, hi index, hi weight)
    (0..2 * len_in)
        .map(|o| {
            let src = 0.5 * o as f64 - 0.25;
            let lo = src.floor();
            let frac = src - lo;
            let i0 = (lo.max(0.0) as usize).min(len_in - 1);
            let i1 = ((lo as isize + 1).max(0) as usize).min(len_in - 1);
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_up2_fwd<T: Element>(a: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let vt = up2_taps(h);
    let ht = up2_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &a[p * h * w..(p + 1) * h * w];
        for &(r0, r1, fr) in &vt {
            let (wr0, wr1) = (T::from_f64(1.0 - fr), T::from_f64(fr));
            let row0 = &plane[r0 * w..(r0 + 1) * w];
            let row1 = &plane[r1 * w..(r1 + 1) * w];
            for &(c0, c1, fc) in &ht {
                let (wc0, wc1) = (T::from_f64(1.0 - fc), T::from_f64(fc));
                let top = row0[c0] * wc0 + row0[c1] * wc1;
                let bot = row1[c0] * wc0 + row1[c1] * wc1;
                out.push(top * wr0 + bot * wr1);
            }
        }
    }
    out
}

pub fn bilinear_up2_bwd<T: Element>(
    g: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
) {
    let vt = up2_taps(h);
    let ht = up2_taps(w);
    let wo = 2 * w;
    for p in 0..n * c {
        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for (oi, &(r0, r1, fr)) in vt.iter().enumerate() {
            let (wr0, wr1) = (T::from_f64(1.0 - fr), T::from_f64(fr));
            for (oj, &(c0, c1, fc)) in ht.iter().enumerate() {
                let gv = gp[oi * wo + oj];
                let (wc0, wc1) = (T::from_f64(1.0 - fc), T::from_f64(fc));
                dp[r0 * w + c0] = dp[r0 * w + c0] + gv * wr0 * wc0;
                dp[r0 * w + c1] = dp[r0 * w + c1] + gv * wr0 * wc1;
                dp[r1 * w + c0] = dp[r1 * w + c0] + gv * wr1 * wc0;
                dp[r1 * w + c1] = dp[r1 * w + c1] + gv * wr1 * wc1;
            }
        }
    }
}
