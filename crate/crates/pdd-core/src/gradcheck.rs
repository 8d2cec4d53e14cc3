//! Finite-difference gradient verification.
//!
//! This is the 64-bit "gradient-check mode": a scalar-valued function of one
//! or more input tensors is differentiated both analytically (via the tape)
//! and by central differences, and the results compared in relative error.

use crate::error::Result;
use crate::rng::Stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient comparison.
#[derive(Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare analytic and central-difference gradients of `f` w.r.t. every
/// entry of every input. `f` receives (tape, tracked inputs) and must
/// return a scalar. Panics are avoided: errors bubble up.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&mut tape, &tracked)?;
    let grads = tape.backward(&loss)?;

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.for_tensor(&tracked[which]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.numel()],
        };
        for i in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = input.data().to_vec();
                data[i] += delta;
                let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
                perturbed[which] = Tensor::from_vec(input.shape().to_vec(), data)?;
                let mut t = Tape::new();
                let tr: Vec<Tensor<f64>> = perturbed.iter().map(|t2| t.watch(t2)).collect();
                Ok(f(&mut t, &tr)?.item())
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
            if rel > tol {
                return Err(crate::error::Error::arg(
                    "gradcheck",
                    format!(
                        "input {which} elem {i}: analytic {a:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                    ),
                ));
            }
        }
    }
    Ok(CheckReport {
        max_rel_error: max_rel,
        checked,
    })
}

/// Random tensor in [-1, 1] for check inputs.
pub fn random_tensor(stream: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| stream.uniform(-1.0, 1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("valid shape")
}

/// Random tensor bounded away from zero norm (for cosine checks).
pub fn random_tensor_nonzero(stream: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let v = stream.uniform(0.2, 1.0);
            if stream.next_u64() & 1 == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("valid shape")
}

/// Result line of the full suite, one per op / loss.
#[derive(Debug)]
pub struct SuiteLine {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

/// Run the finite-difference suite over every differentiable primitive and
/// every training loss, `cases` random cases each. Errors carry the failing
/// op, element and relative error.
pub fn run_full_suite(cases: usize) -> Result<Vec<SuiteLine>> {
    use crate::objectives::{self, DivThresholds, LossWeights};
    use crate::ops;
    use crate::tape::CosineAxis;
    use crate::tensor::FeaturePyramid;

    let mut lines = Vec::new();
    let mut push = |name: &'static str, cases: usize, max_rel: f64| {
        lines.push(SuiteLine {
            name,
            cases,
            max_rel_error: max_rel,
        });
    };

    // conv2d over stride/padding/dilation/kernel combinations.
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0xC0, "gradcheck-conv", case as u64);
            let n = 1 + (s.below(2) as usize);
            let cin = 1 + (s.below(3) as usize);
            let cout = 1 + (s.below(3) as usize);
            let k = 1 + (s.below(3) as usize);
            let stride = 1 + (s.below(2) as usize);
            let padding = s.below(2) as usize;
            let dilation = 1 + (s.below(2) as usize);
            let span = dilation * (k - 1) + 1;
            let h = span + 1 + (s.below(3) as usize);
            let w = span + (s.below(3) as usize);
            let input = random_tensor(&mut s, &[n, cin, h, w]);
            let weight = random_tensor(&mut s, &[cout, cin, k, k]);
            let bias = random_tensor(&mut s, &[cout]);
            let spec = crate::ops::kernels::ConvSpec {
                stride,
                padding,
                dilation,
                kh: k,
                kw: k,
            };
            let (oh, ow) = match (spec.out_dim(h, k), spec.out_dim(w, k)) {
                (Some(oh), Some(ow)) => (oh, ow),
                _ => continue,
            };
            let target = random_tensor(&mut s, &[n, cout, oh, ow]);
            let rep = check(
                &[input, weight, bias],
                |tape, ins| {
                    let out =
                        ops::conv2d(tape, &ins[0], &ins[1], Some(&ins[2]), stride, padding, dilation)?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("conv2d", cases, max_rel);
    }

    // batchnorm_infer (stats constant, grads to input/gamma/beta).
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0xB0, "gradcheck-bn", case as u64);
            let n = 1 + (s.below(2) as usize);
            let c = 1 + (s.below(4) as usize);
            let h = 1 + (s.below(4) as usize);
            let w = 1 + (s.below(4) as usize);
            let input = random_tensor(&mut s, &[n, c, h, w]);
            let gamma = random_tensor(&mut s, &[c]);
            let beta = random_tensor(&mut s, &[c]);
            let mean = random_tensor(&mut s, &[c]);
            let var = Tensor::from_vec(
                vec![c],
                (0..c).map(|_| s.uniform(0.1, 2.0)).collect(),
            )?;
            let target = random_tensor(&mut s, &[n, c, h, w]);
            let rep = check(
                &[input, gamma, beta],
                |tape, ins| {
                    let out = ops::batchnorm_infer(tape, &ins[0], &mean, &var, &ins[1], &ins[2], 1e-5)?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("batchnorm_infer", cases, max_rel);
    }

    // gelu
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0x6E, "gradcheck-gelu", case as u64);
            let n = 2 + (s.below(30) as usize);
            let input = Tensor::from_vec(
                vec![n],
                (0..n).map(|_| s.uniform(-3.0, 3.0)).collect(),
            )?;
            let target = random_tensor(&mut s, &[n]);
            let rep = check(
                &[input],
                |tape, ins| {
                    let out = ops::gelu(tape, &ins[0])?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("gelu", cases, max_rel);
    }

    // bilinear_resize (up and down).
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0xB1, "gradcheck-bilinear", case as u64);
            let n = 1 + (s.below(2) as usize);
            let c = 1 + (s.below(3) as usize);
            let h = 1 + (s.below(5) as usize);
            let w = 1 + (s.below(5) as usize);
            let oh = 1 + (s.below(8) as usize);
            let ow = 1 + (s.below(8) as usize);
            let input = random_tensor(&mut s, &[n, c, h, w]);
            let target = random_tensor(&mut s, &[n, c, oh, ow]);
            let rep = check(
                &[input],
                |tape, ins| {
                    let out = ops::bilinear_resize(tape, &ins[0], oh, ow)?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("bilinear_resize", cases, max_rel);
    }

    // linear
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0x11, "gradcheck-linear", case as u64);
            let r = 1 + (s.below(4) as usize);
            let din = 1 + (s.below(5) as usize);
            let dout = 1 + (s.below(5) as usize);
            let input = random_tensor(&mut s, &[r, din]);
            let weight = random_tensor(&mut s, &[dout, din]);
            let bias = random_tensor(&mut s, &[dout]);
            let target = random_tensor(&mut s, &[r, dout]);
            let rep = check(
                &[input, weight, bias],
                |tape, ins| {
                    let out = ops::linear(tape, &ins[0], &ins[1], &ins[2])?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("linear", cases, max_rel);
    }

    // cosine, flat and channel axes.
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0xC5, "gradcheck-cos", case as u64);
            let n = 1 + (s.below(3) as usize);
            let d = 2 + (s.below(6) as usize);
            let a = random_tensor_nonzero(&mut s, &[n, d]);
            let b = random_tensor_nonzero(&mut s, &[n, d]);
            let target = random_tensor(&mut s, &[n]);
            let rep = check(
                &[a, b],
                |tape, ins| {
                    let out = ops::cosine(tape, &ins[0], &ins[1], CosineAxis::Flat)?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);

            let c = 2 + (s.below(3) as usize);
            let h = 1 + (s.below(3) as usize);
            let w = 1 + (s.below(3) as usize);
            let a = random_tensor_nonzero(&mut s, &[n, c, h, w]);
            let b = random_tensor_nonzero(&mut s, &[n, c, h, w]);
            let target = random_tensor(&mut s, &[n, 1, h, w]);
            let rep = check(
                &[a, b],
                |tape, ins| {
                    let out = ops::cosine(tape, &ins[0], &ins[1], CosineAxis::Channel)?;
                    ops::mse(tape, &out, &target)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("cosine_similarity", cases * 2, max_rel);
    }

    // mse
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0x35, "gradcheck-mse", case as u64);
            let n = 1 + (s.below(20) as usize);
            let a = random_tensor(&mut s, &[n]);
            let b = random_tensor(&mut s, &[n]);
            let rep = check(
                &[a, b],
                |tape, ins| ops::mse(tape, &ins[0], &ins[1]),
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("mse", cases, max_rel);
    }

    // add / affine / relu / mean_all
    {
        let mut max_rel: f64 = 0.0;
        for case in 0..cases {
            let mut s = Stream::derive(0xAD, "gradcheck-elem", case as u64);
            let n = 2 + (s.below(20) as usize);
            let a = random_tensor(&mut s, &[n]);
            let b = random_tensor(&mut s, &[n]);
            let k = s.uniform(-2.0, 2.0);
            let c = s.uniform(-1.0, 1.0);
            let target = random_tensor(&mut s, &[n]);
            // Keep relu inputs away from the kink so FD is valid.
            let relu_in = Tensor::from_vec(
                vec![n],
                (0..n)
                    .map(|_| {
                        let v = s.uniform(0.05, 1.0);
                        if s.next_u64() & 1 == 0 {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect(),
            )?;
            let rep = check(
                &[a, b, relu_in],
                |tape, ins| {
                    let sum = ops::add(tape, &ins[0], &ins[1])?;
                    let scaled = ops::affine(tape, &sum, k, c)?;
                    let gated = ops::relu(tape, &ins[2])?;
                    let joined = ops::add(tape, &scaled, &gated)?;
                    let m = ops::mse(tape, &joined, &target)?;
                    let mean = ops::mean_all(tape, &joined)?;
                    ops::add(tape, &m, &mean)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
        }
        push("add/affine/relu/mean_all", cases, max_rel);
    }

    // Losses over random pyramids. Pyramid tensors are flattened into the
    // check inputs; hinge boundaries are avoided by re-drawing cases whose
    // stage cosines come within 1e-3 of a threshold.
    let weights = LossWeights::default();
    let thresholds = DivThresholds::default();
    let pyramid_shapes = [
        vec![2usize, 2, 4, 4],
        vec![2, 3, 2, 2],
        vec![2, 4, 1, 1],
        vec![2, 4, 1, 1],
    ];
    let build_pyr = |ins: &[Tensor<f64>], offset: usize| {
        FeaturePyramid::new([
            ins[offset].clone(),
            ins[offset + 1].clone(),
            ins[offset + 2].clone(),
            ins[offset + 3].clone(),
        ])
    };
    let draw_pair = |seed_tag: &str, case: u64| -> (Vec<Tensor<f64>>, bool) {
        // Returns 8 tensors (two pyramids) plus a boundary flag.
        for attempt in 0..16 {
            let mut s = Stream::derive(0x77, seed_tag, case * 29 + attempt);
            let mut tensors = Vec::with_capacity(8);
            for shape in pyramid_shapes.iter().chain(pyramid_shapes.iter()) {
                tensors.push(random_tensor_nonzero(&mut s, shape));
            }
            let mut near_boundary = false;
            for i in 0..4 {
                let a = &tensors[i];
                let b = &tensors[i + 4];
                let d = a.numel() / 2;
                for g in 0..2 {
                    let ar = &a.data()[g * d..(g + 1) * d];
                    let br = &b.data()[g * d..(g + 1) * d];
                    let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let cos = dot / (na * nb + 1e-8);
                    if (cos - thresholds.tau_low).abs() < 1e-3
                        || (cos - thresholds.tau_high).abs() < 1e-3
                    {
                        near_boundary = true;
                    }
                }
            }
            if !near_boundary {
                return (tensors, true);
            }
        }
        (Vec::new(), false)
    };

    for (name, which) in [
        ("loss_kr", 0usize),
        ("loss_prp", 1),
        ("loss_div", 2),
        ("loss_total", 3),
    ] {
        let mut max_rel: f64 = 0.0;
        let mut done = 0usize;
        for case in 0..cases {
            let (tensors, ok) = draw_pair(name, case as u64);
            if !ok {
                continue;
            }
            let rep = check(
                &tensors,
                |tape, ins| {
                    let a = build_pyr(ins, 0);
                    let b = build_pyr(ins, 4);
                    match which {
                        0 => objectives::loss_kr(tape, &a, &b),
                        1 => objectives::loss_prp(tape, &a, &b, &weights),
                        2 => objectives::loss_div(tape, &a, &b, &thresholds),
                        _ => {
                            let kr = objectives::loss_kr(tape, &a, &b)?;
                            let prp = objectives::loss_prp(tape, &a, &b, &weights)?;
                            let div = objectives::loss_div(tape, &a, &b, &thresholds)?;
                            objectives::loss_total(tape, &kr, &prp, &div, &weights)
                        }
                    }
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )?;
            max_rel = max_rel.max(rep.max_rel_error);
            done += 1;
        }
        push(name, done, max_rel);
    }

    Ok(lines)
}
