//! Differentiable primitive operations.
//!
//! Each op validates shapes, runs the pure kernel, verifies the output is
//! finite (NaN/Inf is an error, never silent), and records a tape node when
//! any input lies on the differentiable path.

pub mod kernels;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Back, CosineAxis, Saved, Tape};
use crate::tensor::Tensor;

pub use kernels::ConvSpec;

/// Guard added to the cosine denominator product.
pub const COS_EPS: f64 = 1e-8;

fn finite_checked<P: Real>(op: &'static str, t: Tensor<P>) -> Result<Tensor<P>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn tracked<P: Real>(inputs: &[&Tensor<P>]) -> bool {
    inputs.iter().any(|t| t.is_tracked())
}

/// 2-D cross-correlation. input [N,Cin,H,W] · weight [Cout,Cin,kh,kw] (+ bias [Cout]).
pub fn conv2d<P: Real>(
    tape: &mut Tape<P>,
    input: &Tensor<P>,
    weight: &Tensor<P>,
    bias: Option<&Tensor<P>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<P>> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, wcin, kh, kw) = weight.dims4(OP)?;
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::arg(OP, "stride and dilation must be >= 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} != [{cout}]", b.shape()),
            ));
        }
    }
    let spec = ConvSpec {
        stride,
        padding,
        dilation,
        kh,
        kw,
    };
    let oh = spec
        .out_dim(h, kh)
        .ok_or_else(|| Error::shape(OP, format!("non-positive output height for H={h}")))?;
    let ow = spec
        .out_dim(w, kw)
        .ok_or_else(|| Error::shape(OP, format!("non-positive output width for W={w}")))?;

    let mut ins: Vec<&Tensor<P>> = vec![input, weight];
    if let Some(b) = bias {
        ins.push(b);
    }
    let is_tracked = tracked(&ins);
    // On the differentiable path, keep the unfolded columns for backward.
    let mut cols = is_tracked.then(Vec::new);
    let data = kernels::conv2d_forward(
        input.data(),
        n,
        cin,
        h,
        w,
        weight.data(),
        cout,
        bias.map(|b| b.data()),
        &spec,
        oh,
        ow,
        cols.as_mut(),
    );
    let mut out = finite_checked(OP, Tensor::from_vec(vec![n, cout, oh, ow], data)?)?;

    if is_tracked {
        let id = tape.push(Back::Conv2d {
            input: Saved::of(input),
            weight: Saved::of(weight),
            bias_node: bias.and_then(|b| b.node()),
            bias_len: cout,
            spec,
            dims: (n, cin, h, w),
            cout,
            out_hw: (oh, ow),
            cols: cols.unwrap_or_default(),
        });
        out = out.with_node(id);
    }
    Ok(out)
}

/// Channel-wise normalization with externally supplied statistics. The
/// statistics are constants to the graph; gradients flow to input, gamma
/// and beta only.
pub fn batchnorm_infer<P: Real>(
    tape: &mut Tape<P>,
    input: &Tensor<P>,
    mean: &Tensor<P>,
    var: &Tensor<P>,
    gamma: &Tensor<P>,
    beta: &Tensor<P>,
    eps: f64,
) -> Result<Tensor<P>> {
    const OP: &str = "batchnorm_infer";
    let (n, c, h, w) = input.dims4(OP)?;
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::shape(
                OP,
                format!("{name} shape {:?} != [{c}]", t.shape()),
            ));
        }
    }
    if var.data().iter().any(|v| *v < P::ZERO) {
        return Err(Error::arg(OP, "negative variance"));
    }
    let epsp = P::from_f64(eps);
    let inv_std: Vec<P> = var
        .data()
        .iter()
        .map(|&v| P::ONE / (v + epsp).sqrt())
        .collect();
    let spatial = h * w;
    let mut data = vec![P::ZERO; input.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let k = gamma.data()[ci] * inv_std[ci];
            let m = mean.data()[ci];
            let b = beta.data()[ci];
            let base = (ni * c + ci) * spatial;
            for p in 0..spatial {
                data[base + p] = k * (input.data()[base + p] - m) + b;
            }
        }
    }
    let mut out = finite_checked(OP, Tensor::from_vec(input.shape().to_vec(), data)?)?;
    if tracked(&[input, gamma, beta]) {
        let id = tape.push(
            Back::BatchNorm {
                input: Saved::of(input),
                gamma: Saved::of(gamma),
                beta_node: beta.node(),
                mean: mean.data().to_vec(),
                inv_std,
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Exact-erf GeLU, elementwise. On the differentiable path the derivative
/// is evaluated alongside the value, sharing the erf call.
pub fn gelu<P: Real>(tape: &mut Tape<P>, input: &Tensor<P>) -> Result<Tensor<P>> {
    const OP: &str = "gelu";
    if let Some(x_node) = input.node() {
        let mut data = Vec::with_capacity(input.numel());
        let mut deriv = Vec::with_capacity(input.numel());
        for &x in input.data() {
            let (v, d) = kernels::gelu_value_and_derivative(x);
            data.push(v);
            deriv.push(d);
        }
        let out = finite_checked(OP, Tensor::from_vec(input.shape().to_vec(), data)?)?;
        let id = tape.push(Back::Gelu { x_node, deriv });
        Ok(out.with_node(id))
    } else {
        let data: Vec<P> = input.data().iter().map(|&x| kernels::gelu_value(x)).collect();
        finite_checked(OP, Tensor::from_vec(input.shape().to_vec(), data)?)
    }
}

/// Half-pixel-center bilinear resize with edge clamping.
pub fn bilinear_resize<P: Real>(
    tape: &mut Tape<P>,
    input: &Tensor<P>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<P>> {
    const OP: &str = "bilinear_resize";
    let (n, c, h, w) = input.dims4(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(OP, "target dims must be >= 1"));
    }
    let data = kernels::bilinear_forward(input.data(), n, c, h, w, out_h, out_w);
    let mut out = finite_checked(OP, Tensor::from_vec(vec![n, c, out_h, out_w], data)?)?;
    if input.is_tracked() {
        let id = tape.push(
            Back::Bilinear {
                input: Saved::of(input),
                dims: (n, c, h, w),
                out_hw: (out_h, out_w),
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Affine map along the trailing dimension: out[..., o] = W[o,:]·x[..., :] + b[o].
pub fn linear<P: Real>(
    tape: &mut Tape<P>,
    input: &Tensor<P>,
    weight: &Tensor<P>,
    bias: &Tensor<P>,
) -> Result<Tensor<P>> {
    const OP: &str = "linear";
    let ishape = input.shape();
    let din = *ishape
        .last()
        .ok_or_else(|| Error::shape(OP, "input must have rank >= 1"))?;
    let (dout, wdin) = match weight.shape() {
        [o, i] => (*o, *i),
        other => {
            return Err(Error::shape(OP, format!("weight must be 2-d, got {other:?}")));
        }
    };
    if wdin != din {
        return Err(Error::shape(
            OP,
            format!("input trailing dim {din} != weight Din {wdin}"),
        ));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape(
            OP,
            format!("bias shape {:?} != [{dout}]", bias.shape()),
        ));
    }
    let rows = input.numel() / din;
    let mut data = vec![P::ZERO; rows * dout];
    for r in 0..rows {
        let xrow = &input.data()[r * din..(r + 1) * din];
        let orow = &mut data[r * dout..(r + 1) * dout];
        for (o, slot) in orow.iter_mut().enumerate() {
            *slot = kernels::dot(xrow, &weight.data()[o * din..(o + 1) * din]) + bias.data()[o];
        }
    }
    let mut oshape = ishape.to_vec();
    *oshape.last_mut().unwrap() = dout;
    let mut out = finite_checked(OP, Tensor::from_vec(oshape, data)?)?;
    if tracked(&[input, weight, bias]) {
        let id = tape.push(
            Back::Linear {
                input: Saved::of(input),
                weight: Saved::of(weight),
                bias_node: bias.node(),
                rows,
                din,
                dout,
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Cosine similarity along the requested axis, with an epsilon-guarded
/// denominator. Zero-norm inputs yield 0, not NaN.
pub fn cosine<P: Real>(
    tape: &mut Tape<P>,
    a: &Tensor<P>,
    b: &Tensor<P>,
    axis: CosineAxis,
) -> Result<Tensor<P>> {
    const OP: &str = "cosine_similarity";
    if a.shape() != b.shape() {
        return Err(Error::shape(
            OP,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let eps = P::from_f64(COS_EPS);
    let (values, stats, oshape) = match axis {
        CosineAxis::Flat => {
            let n = *a
                .shape()
                .first()
                .ok_or_else(|| Error::shape(OP, "flat cosine needs a batch dim"))?;
            let d = a.numel() / n;
            if d == 0 {
                return Err(Error::shape(OP, "degenerate reduction axis"));
            }
            let mut vals = Vec::with_capacity(n);
            let mut stats = Vec::with_capacity(n);
            for g in 0..n {
                let ar = &a.data()[g * d..(g + 1) * d];
                let br = &b.data()[g * d..(g + 1) * d];
                let s = kernels::dot(ar, br);
                let na = kernels::dot(ar, ar).sqrt();
                let nb = kernels::dot(br, br).sqrt();
                vals.push(s / (na * nb + eps));
                stats.push((s, na, nb));
            }
            (vals, stats, vec![n])
        }
        CosineAxis::Channel => {
            let (n, c, h, w) = a.dims4(OP)?;
            let hw = h * w;
            let mut vals = vec![P::ZERO; n * hw];
            let mut stats = vec![(P::ZERO, P::ZERO, P::ZERO); n * hw];
            for ni in 0..n {
                for p in 0..hw {
                    let mut s = P::ZERO;
                    let mut qa = P::ZERO;
                    let mut qb = P::ZERO;
                    for ci in 0..c {
                        let i = (ni * c + ci) * hw + p;
                        let av = a.data()[i];
                        let bv = b.data()[i];
                        s += av * bv;
                        qa += av * av;
                        qb += bv * bv;
                    }
                    let (na, nb) = (qa.sqrt(), qb.sqrt());
                    vals[ni * hw + p] = s / (na * nb + eps);
                    stats[ni * hw + p] = (s, na, nb);
                }
            }
            (vals, stats, vec![n, 1, h, w])
        }
    };
    let mut out = finite_checked(OP, Tensor::from_vec(oshape, values)?)?;
    if tracked(&[a, b]) {
        let id = tape.push(
            Back::Cosine {
                a: Saved::of(a),
                b: Saved::of(b),
                axis,
                stats,
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Mean squared error over all elements; returns a scalar.
pub fn mse<P: Real>(tape: &mut Tape<P>, a: &Tensor<P>, b: &Tensor<P>) -> Result<Tensor<P>> {
    const OP: &str = "mse";
    if a.shape() != b.shape() {
        return Err(Error::shape(
            OP,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = P::from_f64(a.numel() as f64);
    // Fixed 4-lane grouping, same scheme as `dot`.
    let av = a.data();
    let bv = b.data();
    let n4 = av.len() / 4 * 4;
    let mut acc = [P::ZERO; 4];
    let mut i = 0;
    while i < n4 {
        for lane in 0..4 {
            let d = av[i + lane] - bv[i + lane];
            acc[lane] += d * d;
        }
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < av.len() {
        let d = av[i] - bv[i];
        s += d * d;
        i += 1;
    }
    let mut out = finite_checked(OP, Tensor::scalar(s / n))?;
    if tracked(&[a, b]) {
        let id = tape.push(
            Back::Mse {
                a: Saved::of(a),
                b: Saved::of(b),
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<P: Real>(tape: &mut Tape<P>, a: &Tensor<P>, b: &Tensor<P>) -> Result<Tensor<P>> {
    const OP: &str = "add";
    if a.shape() != b.shape() {
        return Err(Error::shape(
            OP,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data: Vec<P> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let mut out = finite_checked(OP, Tensor::from_vec(a.shape().to_vec(), data)?)?;
    if tracked(&[a, b]) {
        let id = tape.push(
            Back::Add {
                a_node: a.node(),
                b_node: b.node(),
                numel: out.numel(),
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Elementwise k·x + c with scalar constants.
pub fn affine<P: Real>(tape: &mut Tape<P>, x: &Tensor<P>, k: f64, c: f64) -> Result<Tensor<P>> {
    const OP: &str = "affine";
    let kp = P::from_f64(k);
    let cp = P::from_f64(c);
    let data: Vec<P> = x.data().iter().map(|&v| kp * v + cp).collect();
    let mut out = finite_checked(OP, Tensor::from_vec(x.shape().to_vec(), data)?)?;
    if let Some(node) = x.node() {
        let id = tape.push(
            Back::Affine {
                x_node: node,
                k: kp,
                numel: out.numel(),
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Elementwise max(0, x). Subgradient at 0 is 0 (hinge convention).
pub fn relu<P: Real>(tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
    const OP: &str = "relu";
    let data: Vec<P> = x
        .data()
        .iter()
        .map(|&v| if v > P::ZERO { v } else { P::ZERO })
        .collect();
    let mut out = finite_checked(OP, Tensor::from_vec(x.shape().to_vec(), data)?)?;
    if x.is_tracked() {
        let id = tape.push(
            Back::Relu {
                input: Saved::of(x),
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}

/// Mean over all elements; returns a scalar.
pub fn mean_all<P: Real>(tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
    const OP: &str = "mean_all";
    let n = P::from_f64(x.numel() as f64);
    let mut s = P::ZERO;
    for &v in x.data() {
        s += v;
    }
    let mut out = finite_checked(OP, Tensor::scalar(s / n))?;
    if let Some(node) = x.node() {
        let id = tape.push(
            Back::MeanAll {
                x_node: node,
                numel: x.numel(),
            },
        );
        out = out.with_node(id);
    }
    Ok(out)
}
