//! Pure numeric kernels shared by the forward ops and the tape backward.
//!
//! Everything here is deterministic by construction: accumulation orders are
//! fixed, reductions use a fixed 4-lane grouping, and no kernel depends on
//! platform math beyond `libm` calls routed through `Real`.

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvSpec {
    pub fn out_dim(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Dot product with fixed 4-accumulator grouping (fast and reproducible).
pub fn dot<P: Real>(a: &[P], b: &[P]) -> P {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() / 4 * 4;
    let mut acc = [P::ZERO; 4];
    let mut i = 0;
    while i < n4 {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < a.len() {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

/// out[m×n] += a[m×k] · b[k×n].
///
/// Wide outputs use a k-outer / n-inner order (unit-stride vectorizable,
/// ascending-k accumulation per element). Narrow outputs (n < 16, the deep
/// stages with tiny spatial extent) transpose `b` once and use long dot
/// products instead. Both paths have fixed accumulation orders.
pub fn matmul_acc<P: Real>(out: &mut [P], a: &[P], b: &[P], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if n < 16 {
        let mut bt = vec![P::ZERO; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (j, slot) in out_row.iter_mut().enumerate() {
                *slot += dot(a_row, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Unfold one sample `[C, H, W]` into columns `[C·kh·kw, OH·OW]`.
pub fn im2col<P: Real>(
    input: &[P],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [P],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(col.len(), c * spec.kh * spec.kw * oh * ow);
    let m = oh * ow;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let row_idx = (ci * spec.kh + ky) * spec.kw + kx;
                let row = &mut col[row_idx * m..(row_idx + 1) * m];
                let shift = (kx * spec.dilation) as isize - spec.padding as isize;
                // Valid ox range: 0 <= ox*stride + shift < w.
                let (lo, hi) = valid_range(ow, spec.stride, shift, w);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    let seg = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(P::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..lo].fill(P::ZERO);
                    seg[hi..].fill(P::ZERO);
                    if spec.stride == 1 {
                        let s0 = (lo as isize + shift) as usize;
                        seg[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, slot) in seg[lo..hi].iter_mut().enumerate() {
                            let ix = ((lo + ox) * spec.stride) as isize + shift;
                            *slot = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open `ox` range with `0 <= ox*stride + shift < w`.
fn valid_range(ow: usize, stride: usize, shift: isize, w: usize) -> (usize, usize) {
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    }
    .min(ow);
    let last = w as isize - 1 - shift;
    let hi = if last < 0 {
        lo
    } else {
        (last as usize / stride + 1).clamp(lo, ow)
    };
    (lo, hi)
}

/// Fold columns back onto an input-shaped gradient (transpose of `im2col`).
pub fn col2im_acc<P: Real>(
    col: &[P],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dinput: &mut [P],
) {
    let m = oh * ow;
    for ci in 0..c {
        let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let row_idx = (ci * spec.kh + ky) * spec.kw + kx;
                let row = &col[row_idx * m..(row_idx + 1) * m];
                let shift = (kx * spec.dilation) as isize - spec.padding as isize;
                let (lo, hi) = valid_range(ow, spec.stride, shift, w);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &row[oy * ow..(oy + 1) * ow];
                    if spec.stride == 1 {
                        let s0 = (lo as isize + shift) as usize;
                        for (d, v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                            *d += *v;
                        }
                    } else {
                        for (ox, v) in seg[lo..hi].iter().enumerate() {
                            let ix = ((lo + ox) * spec.stride) as isize + shift;
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward for a whole batch.
/// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] optional.
/// When `save_cols` is given, the per-sample im2col buffers are appended to
/// it so the backward pass can skip the unfold.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<P: Real>(
    input: &[P],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[P],
    cout: usize,
    bias: Option<&[P]>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    mut save_cols: Option<&mut Vec<P>>,
) -> Vec<P> {
    let k = cin * spec.kh * spec.kw;
    let m = oh * ow;
    let mut out = vec![P::ZERO; n * cout * m];
    let mut col = vec![P::ZERO; k * m];
    if let Some(cols) = save_cols.as_deref_mut() {
        cols.reserve(n * k * m);
    }
    for ni in 0..n {
        let x = &input[ni * cin * h * w..(ni + 1) * cin * h * w];
        im2col(x, cin, h, w, spec, oh, ow, &mut col);
        let out_n = &mut out[ni * cout * m..(ni + 1) * cout * m];
        if let Some(b) = bias {
            for co in 0..cout {
                out_n[co * m..(co + 1) * m].fill(b[co]);
            }
        }
        matmul_acc(out_n, weight, &col, cout, k, m);
        if let Some(cols) = save_cols.as_deref_mut() {
            cols.extend_from_slice(&col);
        }
    }
    out
}

/// Gradients of conv2d w.r.t. input, weight and bias. `saved_cols`, when
/// present, holds the concatenated per-sample im2col buffers from the
/// forward pass; otherwise they are rebuilt here.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<P: Real>(
    gout: &[P],
    input: &[P],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[P],
    cout: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    saved_cols: Option<&[P]>,
    dinput: Option<&mut [P]>,
    dweight: Option<&mut [P]>,
    dbias: Option<&mut [P]>,
) {
    let k = cin * spec.kh * spec.kw;
    let m = oh * ow;
    let mut col_buf = vec![P::ZERO; if saved_cols.is_none() { k * m } else { 0 }];
    let mut colt = vec![P::ZERO; if dweight.is_some() { k * m } else { 0 }];
    let mut dcol = vec![P::ZERO; if dinput.is_some() { k * m } else { 0 }];
    let mut dinput = dinput;
    let mut dweight = dweight;
    let mut dbias = dbias;
    for ni in 0..n {
        let g = &gout[ni * cout * m..(ni + 1) * cout * m];
        if let Some(db) = dbias.as_deref_mut() {
            for co in 0..cout {
                let grow = &g[co * m..(co + 1) * m];
                let mut s = P::ZERO;
                for v in grow {
                    s += *v;
                }
                db[co] += s;
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let col: &[P] = match saved_cols {
                Some(cols) => &cols[ni * k * m..(ni + 1) * k * m],
                None => {
                    let x = &input[ni * cin * h * w..(ni + 1) * cin * h * w];
                    im2col(x, cin, h, w, spec, oh, ow, &mut col_buf);
                    &col_buf
                }
            };
            // Transpose once, then dW[co, :] += g[co, p] · colT[p, :] with a
            // unit-stride inner loop.
            for kk in 0..k {
                let src = &col[kk * m..(kk + 1) * m];
                for (p, &v) in src.iter().enumerate() {
                    colt[p * k + kk] = v;
                }
            }
            for co in 0..cout {
                let grow = &g[co * m..(co + 1) * m];
                let dw_row = &mut dw[co * k..(co + 1) * k];
                for (p, &gv) in grow.iter().enumerate() {
                    let trow = &colt[p * k..(p + 1) * k];
                    for (d, &cv) in dw_row.iter_mut().zip(trow.iter()) {
                        *d += gv * cv;
                    }
                }
            }
        }
        if let Some(dx) = dinput.as_deref_mut() {
            // dcol = Wᵀ · g, then fold back. For narrow outputs build the
            // [m×k] transpose with unit-stride axpys over k, then flip.
            dcol.fill(P::ZERO);
            if m < 16 {
                let mut dcolt = vec![P::ZERO; m * k];
                for co in 0..cout {
                    let grow = &g[co * m..(co + 1) * m];
                    let wrow = &weight[co * k..(co + 1) * k];
                    for (p, &gv) in grow.iter().enumerate() {
                        let trow = &mut dcolt[p * k..(p + 1) * k];
                        for (d, &wv) in trow.iter_mut().zip(wrow.iter()) {
                            *d += gv * wv;
                        }
                    }
                }
                for p in 0..m {
                    for kk in 0..k {
                        dcol[kk * m + p] = dcolt[p * k + kk];
                    }
                }
            } else {
                for co in 0..cout {
                    let grow = &g[co * m..(co + 1) * m];
                    let wrow = &weight[co * k..(co + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let drow = &mut dcol[kk * m..(kk + 1) * m];
                        for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            col2im_acc(
                &dcol,
                cin,
                h,
                w,
                spec,
                oh,
                ow,
                &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w],
            );
        }
    }
}

/// Half-pixel-center bilinear sample positions with edge clamping.
/// Returns (lo index, hi index, fractional weight toward hi).
pub fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let t = (src - lo as f64).clamp(0.0, 1.0);
            (lo, hi, t)
        })
        .collect()
}

/// Bilinear resize of [N,C,H,W] to (out_h, out_w). The interpolation uses
/// the `a + t·(b−a)` form, so constant inputs are preserved exactly and the
/// output never leaves the input value range.
pub fn bilinear_forward<P: Real>(
    input: &[P],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<P> {
    if out_h == h && out_w == w {
        return input.to_vec();
    }
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    let mut out = vec![P::ZERO; n * c * out_h * out_w];
    for plane_idx in 0..n * c {
        let src = &input[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let ty = P::from_f64(ty);
            let row0 = &src[y0 * w..(y0 + 1) * w];
            let row1 = &src[y1 * w..(y1 + 1) * w];
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let tx = P::from_f64(tx);
                let top = row0[x0] + tx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + tx * (row1[x1] - row1[x0]);
                drow[ox] = top + ty * (bot - top);
            }
        }
    }
    out
}

pub fn bilinear_backward<P: Real>(
    gout: &[P],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dinput: &mut [P],
) {
    if out_h == h && out_w == w {
        for (d, g) in dinput.iter_mut().zip(gout.iter()) {
            *d += *g;
        }
        return;
    }
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    for plane_idx in 0..n * c {
        let g = &gout[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
        let dst = &mut dinput[plane_idx * h * w..(plane_idx + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let gv = g[oy * out_w + ox].to_f64();
                let w00 = (1.0 - ty) * (1.0 - tx);
                let w01 = (1.0 - ty) * tx;
                let w10 = ty * (1.0 - tx);
                let w11 = ty * tx;
                dst[y0 * w + x0] += P::from_f64(gv * w00);
                dst[y0 * w + x1] += P::from_f64(gv * w01);
                dst[y1 * w + x0] += P::from_f64(gv * w10);
                dst[y1 * w + x1] += P::from_f64(gv * w11);
            }
        }
    }
}

/// Exact-erf GeLU.
pub fn gelu_value<P: Real>(x: P) -> P {
    let half = P::from_f64(0.5);
    let inv_sqrt2 = P::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    half * x * (P::ONE + (x * inv_sqrt2).erf())
}

pub fn gelu_derivative<P: Real>(x: P) -> P {
    let half = P::from_f64(0.5);
    let inv_sqrt2 = P::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = P::from_f64(1.0 / (2.0 * core::f64::consts::PI).sqrt());
    let cdf = half * (P::ONE + (x * inv_sqrt2).erf());
    let pdf = (-(half * x * x)).exp() * inv_sqrt_2pi;
    cdf + x * pdf
}

/// Value and derivative together, sharing one erf evaluation.
pub fn gelu_value_and_derivative<P: Real>(x: P) -> (P, P) {
    let half = P::from_f64(0.5);
    let inv_sqrt2 = P::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = P::from_f64(1.0 / (2.0 * core::f64::consts::PI).sqrt());
    let cdf = half * (P::ONE + (x * inv_sqrt2).erf());
    let pdf = (-(half * x * x)).exp() * inv_sqrt_2pi;
    (x * cdf, cdf + x * pdf)
}
