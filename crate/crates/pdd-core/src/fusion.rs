//! Feature fusion between the two teacher manifolds.
//!
//! Three pieces: a parameter-free inter-level fusion that resizes the scan
//! teacher's map onto the conv teacher's grid and adds them; a trainable
//! residual conv adapter that aligns the two feature spaces; and per-stage
//! affine projections whose outputs feed the second student as skips.

use crate::backbones::{BatchNorm, Conv2d};
use crate::error::{Error, Result};
use crate::ops;
use crate::param::Param;
use crate::real::Real;
use crate::rng::Stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Parameter-free fusion: upsample `f_m` to `f_c`'s grid and add.
pub fn ina_fuse<P: Real>(
    tape: &mut Tape<P>,
    f_m: &Tensor<P>,
    f_c: &Tensor<P>,
) -> Result<Tensor<P>> {
    const OP: &str = "ina_fuse";
    let (_, cm, _, _) = f_m.dims4(OP)?;
    let (_, cc, h, w) = f_c.dims4(OP)?;
    if cm != cc {
        return Err(Error::shape(
            OP,
            format!("channel mismatch: f_m has {cm}, f_c has {cc}"),
        ));
    }
    let scaled = ops::bilinear_resize(tape, f_m, h, w)?;
    ops::add(tape, &scaled, f_c)
}

/// Residual conv adapter: a 1x1 channel adaptation followed by BN, GeLU and
/// a 3x3 spatial conv, with the 1x1 output as the residual branch.
#[derive(Clone, Debug)]
pub struct MmuBlock<P: Real> {
    pub c1: Conv2d<P>,
    pub bn: BatchNorm<P>,
    pub c3: Conv2d<P>,
}

impl<P: Real> MmuBlock<P> {
    pub fn init(name: &str, rng: &mut Stream, cin: usize, cout: usize) -> Self {
        MmuBlock {
            // Kernel size 1 makes dilation a no-op, so the "dilated" 1x1 is
            // an ordinary pointwise conv.
            c1: Conv2d::init(&format!("{name}.c1"), rng, cin, cout, 1, 1, 0, true, 0.0, true),
            bn: BatchNorm::init(&format!("{name}.bn"), cout, true),
            c3: Conv2d::init(&format!("{name}.c3"), rng, cout, cout, 3, 1, 1, true, 0.0, true),
        }
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        let mut v = self.c1.params();
        v.extend(self.bn.params());
        v.extend(self.c3.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = self.c1.params_mut();
        v.extend(self.bn.params_mut());
        v.extend(self.c3.params_mut());
        v
    }

    pub fn states(&self) -> Vec<(String, &[P])> {
        self.bn.states()
    }

    pub fn states_mut(&mut self) -> Vec<(String, &mut Vec<P>)> {
        self.bn.states_mut()
    }
}

/// Adapter forward: C3(GeLU(BN(C1(f_m)))) + C1(f_m). The residual branch is
/// exactly the 1x1 output, computed once and reused. The `_train` variant
/// normalizes with batch statistics and updates the running statistics; the
/// eval variant uses the running statistics.
pub fn mmu_adapt_train<P: Real>(
    tape: &mut Tape<P>,
    f_m: &Tensor<P>,
    block: &mut MmuBlock<P>,
) -> Result<Tensor<P>> {
    let u = block.c1.forward(tape, f_m)?;
    let h = block.bn.forward_train(tape, &u)?;
    let h = ops::gelu(tape, &h)?;
    let h = block.c3.forward(tape, &h)?;
    ops::add(tape, &h, &u)
}

pub fn mmu_adapt<P: Real>(
    tape: &mut Tape<P>,
    f_m: &Tensor<P>,
    block: &MmuBlock<P>,
) -> Result<Tensor<P>> {
    let u = block.c1.forward(tape, f_m)?;
    let h = block.bn.forward_eval(tape, &u)?;
    let h = ops::gelu(tape, &h)?;
    let h = block.c3.forward(tape, &h)?;
    ops::add(tape, &h, &u)
}

fn fuse_adapted<P: Real>(
    tape: &mut Tape<P>,
    adapted: &Tensor<P>,
    f_c: &Tensor<P>,
) -> Result<Tensor<P>> {
    const OP: &str = "mmu_fuse";
    let (_, ca, _, _) = adapted.dims4(OP)?;
    let (_, cc, h, w) = f_c.dims4(OP)?;
    if ca != cc {
        return Err(Error::shape(
            OP,
            format!("adapted channels {ca} != target channels {cc}"),
        ));
    }
    let aligned = ops::bilinear_resize(tape, adapted, h, w)?;
    ops::add(tape, &aligned, f_c)
}

/// Unified feature: spatially align the adapted scan features to the conv
/// grid (when needed) and add.
pub fn mmu_fuse_train<P: Real>(
    tape: &mut Tape<P>,
    f_m: &Tensor<P>,
    f_c: &Tensor<P>,
    block: &mut MmuBlock<P>,
) -> Result<Tensor<P>> {
    let adapted = mmu_adapt_train(tape, f_m, block)?;
    fuse_adapted(tape, &adapted, f_c)
}

pub fn mmu_fuse<P: Real>(
    tape: &mut Tape<P>,
    f_m: &Tensor<P>,
    f_c: &Tensor<P>,
    block: &MmuBlock<P>,
) -> Result<Tensor<P>> {
    let adapted = mmu_adapt(tape, f_m, block)?;
    fuse_adapted(tape, &adapted, f_c)
}

/// Per-stage channel-axis affine projections (stages 1..=3; the deepest
/// unified feature is consumed directly as the student bottleneck, so it
/// carries no head).
#[derive(Clone, Debug)]
pub struct MpaHead<P: Real> {
    /// (weight [c,c,1,1], bias [c]) per covered stage.
    stages: Vec<(Param<P>, Param<P>)>,
}

pub const MPA_COVERED_STAGES: usize = 3;

impl<P: Real> MpaHead<P> {
    pub fn init(name: &str, rng: &mut Stream, stage_channels: &[usize; 4]) -> Self {
        let stages = (0..MPA_COVERED_STAGES)
            .map(|idx| {
                let c = stage_channels[idx];
                let std = (2.0 / c as f64).sqrt();
                let wdata: Vec<P> = (0..c * c).map(|_| P::from_f64(rng.normal() * std)).collect();
                let w = Param::new(
                    format!("{name}.stage{}.weight", idx + 1),
                    Tensor::from_vec(vec![c, c, 1, 1], wdata).expect("mpa weight"),
                    true,
                );
                let b = Param::new(
                    format!("{name}.stage{}.bias", idx + 1),
                    Tensor::zeros(vec![c]),
                    true,
                );
                (w, b)
            })
            .collect();
        MpaHead { stages }
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        self.stages.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        self.stages
            .iter_mut()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Project the unified feature of `stage` through its affine head. The map
/// is applied along the channel axis at every spatial location.
pub fn mpa_project<P: Real>(
    tape: &mut Tape<P>,
    f_t: &Tensor<P>,
    head: &MpaHead<P>,
    stage: usize,
) -> Result<Tensor<P>> {
    const OP: &str = "mpa_project";
    if !(1..=4).contains(&stage) {
        return Err(Error::arg(OP, format!("stage {stage} out of [1, 4]")));
    }
    let Some((w, b)) = head.stages.get(stage - 1) else {
        return Err(Error::arg(
            OP,
            format!("stage {stage} has no projection head (bottleneck stage)"),
        ));
    };
    let (_, c, _, _) = f_t.dims4(OP)?;
    let (co, ci, _, _) = w.value().dims4(OP)?;
    if ci != c || co != c {
        return Err(Error::shape(
            OP,
            format!("head is {co}x{ci} but feature has {c} channels"),
        ));
    }
    let wt = tape.attach(w);
    let bt = tape.attach(b);
    ops::conv2d(tape, f_t, &wt, Some(&bt), 1, 0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn rng() -> Stream {
        Stream::from_seed(99)
    }

    /// Identity-channel 1x1 conv weight.
    fn identity_c1(c: usize) -> Vec<f64> {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        w
    }

    #[test]
    fn ina_equal_dims_is_elementwise_add() {
        let mut s = rng();
        let a = random_tensor(&mut s, &[1, 3, 4, 4]);
        let b = random_tensor(&mut s, &[1, 3, 4, 4]);
        let mut tape = Tape::new();
        let f = ina_fuse(&mut tape, &a, &b).unwrap();
        for i in 0..f.numel() {
            assert_eq!(f.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn ina_constants_survive_upsampling() {
        let a = Tensor::full(vec![1, 2, 8, 8], 0.5f64);
        let b = Tensor::full(vec![1, 2, 16, 16], 0.25f64);
        let mut tape = Tape::new();
        let f = ina_fuse(&mut tape, &a, &b).unwrap();
        assert_eq!(f.shape(), &[1, 2, 16, 16]);
        assert!(f.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn ina_channel_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(vec![1, 3, 8, 8]);
        let b = Tensor::<f64>::zeros(vec![1, 2, 8, 8]);
        let mut tape = Tape::new();
        assert!(ina_fuse(&mut tape, &a, &b).is_err());
    }

    #[test]
    fn ina_is_linear() {
        let mut s = rng();
        let a = random_tensor(&mut s, &[1, 2, 4, 4]);
        let b = random_tensor(&mut s, &[1, 2, 8, 8]);
        let alpha = 1.7;
        let scale = |t: &Tensor<f64>| {
            Tensor::from_vec(
                t.shape().to_vec(),
                t.data().iter().map(|v| v * alpha).collect(),
            )
            .unwrap()
        };
        let mut tape = Tape::new();
        let f1 = ina_fuse(&mut tape, &scale(&a), &scale(&b)).unwrap();
        let f2 = ina_fuse(&mut tape, &a, &b).unwrap();
        for i in 0..f1.numel() {
            assert!((f1.data()[i] - alpha * f2.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mmu_identity_residual_path() {
        // C1 = channel identity, C3 = zero kernel, BN identity -> output = f_m.
        let c = 3;
        let mut block = MmuBlock::<f64>::init("mmu", &mut rng(), c, c);
        block
            .c1
            .weight
            .set_value(Tensor::from_vec(vec![c, c, 1, 1], identity_c1(c)).unwrap());
        if let Some(b) = &mut block.c1.bias {
            b.set_value(Tensor::zeros(vec![c]));
        }
        block
            .c3
            .weight
            .set_value(Tensor::zeros(vec![c, c, 3, 3]));
        if let Some(b) = &mut block.c3.bias {
            b.set_value(Tensor::zeros(vec![c]));
        }
        let mut s = rng();
        let f_m = random_tensor(&mut s, &[2, c, 4, 4]);
        let mut tape = Tape::new();
        let out = mmu_adapt(&mut tape, &f_m, &block).unwrap();
        for i in 0..out.numel() {
            assert!((out.data()[i] - f_m.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mmu_zero_c1_zero_beta_gives_zero() {
        let c = 2;
        let mut block = MmuBlock::<f64>::init("mmu", &mut rng(), c, c);
        block
            .c1
            .weight
            .set_value(Tensor::zeros(vec![c, c, 1, 1]));
        if let Some(b) = &mut block.c1.bias {
            b.set_value(Tensor::zeros(vec![c]));
        }
        if let Some(b) = &mut block.c3.bias {
            b.set_value(Tensor::zeros(vec![c]));
        }
        let mut s = rng();
        let f_m = random_tensor(&mut s, &[1, c, 4, 4]);
        let mut tape = Tape::new();
        let out = mmu_adapt(&mut tape, &f_m, &block).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mmu_matches_op_composition_oracle() {
        // Recompose the stated op order independently and compare.
        let c = 4;
        let mut block = MmuBlock::<f64>::init("mmu", &mut rng(), c, c);
        let mut s = rng();
        let f_m = random_tensor(&mut s, &[2, c, 5, 5]);
        let mut tape = Tape::new();
        let got = mmu_adapt(&mut tape, &f_m, &block).unwrap();

        let u = block.c1.forward(&mut tape, &f_m).unwrap();
        let mean = Tensor::from_vec(vec![c], block.bn.running_mean.clone()).unwrap();
        let var = Tensor::from_vec(vec![c], block.bn.running_var.clone()).unwrap();
        let bn = ops::batchnorm_infer(
            &mut tape,
            &u,
            &mean,
            &var,
            block.bn.gamma.value(),
            block.bn.beta.value(),
            block.bn.eps,
        )
        .unwrap();
        let act = ops::gelu(&mut tape, &bn).unwrap();
        let conv = block.c3.forward(&mut tape, &act).unwrap();
        let want = ops::add(&mut tape, &conv, &u).unwrap();
        for i in 0..got.numel() {
            assert!((got.data()[i] - want.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mmu_fuse_keeps_target_shape_and_skips_resize_when_equal() {
        let c = 3;
        let block = MmuBlock::<f64>::init("mmu", &mut rng(), c, c);
        let mut s = rng();
        for (hw_m, hw_c) in [((4, 4), (4, 4)), ((4, 4), (8, 8)), ((2, 6), (8, 12))] {
            let f_m = random_tensor(&mut s, &[1, c, hw_m.0, hw_m.1]);
            let f_c = random_tensor(&mut s, &[1, c, hw_c.0, hw_c.1]);
            let mut tape = Tape::new();
            let f_t = mmu_fuse(&mut tape, &f_m, &f_c, &block).unwrap();
            assert_eq!(f_t.shape(), f_c.shape());
        }
    }

    #[test]
    fn mmu_fuse_zero_input_passes_target_through() {
        let c = 2;
        let mut block = MmuBlock::<f64>::init("mmu", &mut rng(), c, c);
        for conv in [&mut block.c1, &mut block.c3] {
            if let Some(b) = &mut conv.bias {
                b.set_value(Tensor::zeros(vec![c]));
            }
        }
        let f_m = Tensor::zeros(vec![1, c, 4, 4]);
        let mut s = rng();
        let f_c = random_tensor(&mut s, &[1, c, 8, 8]);
        let mut tape = Tape::new();
        let f_t = mmu_fuse(&mut tape, &f_m, &f_c, &block).unwrap();
        for i in 0..f_t.numel() {
            assert_eq!(f_t.data()[i], f_c.data()[i]);
        }
    }

    #[test]
    fn mpa_identity_and_constant_heads() {
        let channels = [3usize, 4, 5, 6];
        let mut head = MpaHead::<f64>::init("mpa", &mut rng(), &channels);
        let c = channels[0];
        head.stages[0].0.set_value(
            Tensor::from_vec(vec![c, c, 1, 1], identity_c1(c)).unwrap(),
        );
        head.stages[0].1.set_value(Tensor::zeros(vec![c]));
        let mut s = rng();
        let f_t = random_tensor(&mut s, &[2, c, 4, 4]);
        let mut tape = Tape::new();
        let z = mpa_project(&mut tape, &f_t, &head, 1).unwrap();
        for i in 0..z.numel() {
            assert!((z.data()[i] - f_t.data()[i]).abs() < 1e-12);
        }

        // Zero weight, bias b0 -> spatially constant per channel.
        head.stages[0]
            .0
            .set_value(Tensor::zeros(vec![c, c, 1, 1]));
        head.stages[0].1.set_value(
            Tensor::from_vec(vec![c], (0..c).map(|i| i as f64).collect()).unwrap(),
        );
        let z = mpa_project(&mut tape, &f_t, &head, 1).unwrap();
        for ni in 0..2 {
            for ci in 0..c {
                for p in 0..16 {
                    assert_eq!(z.data()[(ni * c + ci) * 16 + p], ci as f64);
                }
            }
        }
    }

    #[test]
    fn mpa_matches_per_location_linear_oracle() {
        let channels = [3usize, 4, 5, 6];
        let head = MpaHead::<f64>::init("mpa", &mut rng(), &channels);
        let c = channels[1];
        let mut s = rng();
        let f_t = random_tensor(&mut s, &[2, c, 3, 3]);
        let mut tape = Tape::new();
        let z = mpa_project(&mut tape, &f_t, &head, 2).unwrap();
        let w = head.stages[1].0.value();
        let b = head.stages[1].1.value();
        for ni in 0..2 {
            for p in 0..9 {
                for co in 0..c {
                    let mut want = b.data()[co];
                    for ci in 0..c {
                        want += w.data()[co * c + ci] * f_t.data()[(ni * c + ci) * 9 + p];
                    }
                    let got = z.data()[(ni * c + co) * 9 + p];
                    assert!((got - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mpa_stage_domain_errors() {
        let head = MpaHead::<f64>::init("mpa", &mut rng(), &[2, 2, 2, 2]);
        let f_t = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        let mut tape = Tape::new();
        assert!(mpa_project(&mut tape, &f_t, &head, 0).is_err());
        assert!(mpa_project(&mut tape, &f_t, &head, 5).is_err());
        // Stage 4 is in [1,4] but intentionally carries no head.
        assert!(mpa_project(&mut tape, &f_t, &head, 4).is_err());
    }
}
