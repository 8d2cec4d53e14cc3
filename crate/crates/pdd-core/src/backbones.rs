//! Frozen teacher encoders and trainable student decoders.
//!
//! Both teachers are desk-scale stand-ins with seeded random weights: a
//! convolutional encoder with local receptive fields, and a sequence-scan
//! encoder whose bidirectional exponential-decay scan gives every output
//! position a path from every input position. They share stage shapes so
//! their pyramids can be fused elementwise.

use crate::error::{Error, Result};
use crate::ops;
use crate::param::Param;
use crate::real::Real;
use crate::rng::Stream;
use crate::tape::Tape;
use crate::tensor::{FeaturePyramid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: (64, 64),
            in_channels: 1,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size ({h}, {w}) must be positive and divisible by 32"
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be >= 1".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial dims of stage `i` (1-based): (H, W) / 2^(i+1).
    pub fn stage_hw(&self, i: usize) -> (usize, usize) {
        let (h, w) = self.input_size;
        (h >> (i + 1), w >> (i + 1))
    }

    pub fn stage_shape(&self, i: usize, batch: usize) -> Vec<usize> {
        let (h, w) = self.stage_hw(i);
        vec![batch, self.stage_channels[i - 1], h, w]
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv2d<P: Real> {
    pub weight: Param<P>,
    pub bias: Option<Param<P>>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<P: Real> Conv2d<P> {
    /// He-normal weight init; bias starts at zero unless `bias_std > 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        rng: &mut Stream,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        bias_std: f64,
        trainable: bool,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let wdata: Vec<P> = (0..cout * cin * k * k)
            .map(|_| P::from_f64(rng.normal() * std))
            .collect();
        let weight = Param::new(
            format!("{name}.weight"),
            Tensor::from_vec(vec![cout, cin, k, k], wdata).expect("conv weight shape"),
            trainable,
        );
        let bias = bias.then(|| {
            let bdata: Vec<P> = (0..cout)
                .map(|_| P::from_f64(rng.normal() * bias_std))
                .collect();
            Param::new(
                format!("{name}.bias"),
                Tensor::from_vec(vec![cout], bdata).expect("conv bias shape"),
                trainable,
            )
        });
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn forward(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        let w = tape.attach(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.attach(b));
        ops::conv2d(tape, x, &w, b.as_ref(), self.stride, self.padding, self.dilation)
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Batch normalization. Training mode normalizes with batch statistics
/// (treated as constants in backward) while tracking running statistics
/// with momentum 0.1; eval mode normalizes with the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<P: Real> {
    pub name: String,
    pub gamma: Param<P>,
    pub beta: Param<P>,
    pub running_mean: Vec<P>,
    pub running_var: Vec<P>,
    pub eps: f64,
    pub momentum: f64,
}

impl<P: Real> BatchNorm<P> {
    pub fn init(name: &str, channels: usize, trainable: bool) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Param::new(
                format!("{name}.gamma"),
                Tensor::full(vec![channels], P::ONE),
                trainable,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                Tensor::zeros(vec![channels]),
                trainable,
            ),
            running_mean: vec![P::ZERO; channels],
            running_var: vec![P::ONE; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_eval(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        let c = self.running_mean.len();
        let mean = Tensor::from_vec(vec![c], self.running_mean.clone())?;
        let var = Tensor::from_vec(vec![c], self.running_var.clone())?;
        let g = tape.attach(&self.gamma);
        let b = tape.attach(&self.beta);
        ops::batchnorm_infer(tape, x, &mean, &var, &g, &b, self.eps)
    }

    pub fn forward_train(&mut self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        let (n, c, h, w) = x.dims4("batchnorm_train")?;
        let count = P::from_f64((n * h * w) as f64);
        let mut mean = vec![P::ZERO; c];
        let mut var = vec![P::ZERO; c];
        for ci in 0..c {
            let mut s = P::ZERO;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    s += x.data()[base + p];
                }
            }
            mean[ci] = s / count;
            let mut q = P::ZERO;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    let d = x.data()[base + p] - mean[ci];
                    q += d * d;
                }
            }
            var[ci] = q / count;
        }
        let mom = P::from_f64(self.momentum);
        let keep = P::from_f64(1.0 - self.momentum);
        for ci in 0..c {
            self.running_mean[ci] = keep * self.running_mean[ci] + mom * mean[ci];
            self.running_var[ci] = keep * self.running_var[ci] + mom * var[ci];
        }
        let mean = Tensor::from_vec(vec![c], mean)?;
        let var = Tensor::from_vec(vec![c], var)?;
        let g = tape.attach(&self.gamma);
        let b = tape.attach(&self.beta);
        ops::batchnorm_infer(tape, x, &mean, &var, &g, &b, self.eps)
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn states(&self) -> Vec<(String, &[P])> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean[..]),
            (format!("{}.running_var", self.name), &self.running_var[..]),
        ]
    }

    pub fn states_mut(&mut self) -> Vec<(String, &mut Vec<P>)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }
}

// ---------------------------------------------------------------------------
// Local (convolutional) teacher
// ---------------------------------------------------------------------------

/// Residual conv block: gelu(bn2(conv2(gelu(bn1(conv1 x)))) + shortcut(x)).
#[derive(Clone, Debug)]
struct ConvBlock<P: Real> {
    conv1: Conv2d<P>,
    bn1: BatchNorm<P>,
    conv2: Conv2d<P>,
    bn2: BatchNorm<P>,
    shortcut: Option<Conv2d<P>>,
}

impl<P: Real> ConvBlock<P> {
    fn init(
        name: &str,
        rng: &mut Stream,
        cin: usize,
        cout: usize,
        stride: usize,
        trainable: bool,
    ) -> Self {
        let conv1 = Conv2d::init(
            &format!("{name}.conv1"),
            rng,
            cin,
            cout,
            3,
            stride,
            1,
            trainable,
            0.0,
            trainable,
        );
        let bn1 = BatchNorm::init(&format!("{name}.bn1"), cout, trainable);
        let conv2 = Conv2d::init(
            &format!("{name}.conv2"),
            rng,
            cout,
            cout,
            3,
            1,
            1,
            trainable,
            0.0,
            trainable,
        );
        let bn2 = BatchNorm::init(&format!("{name}.bn2"), cout, trainable);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            Conv2d::init(
                &format!("{name}.shortcut"),
                rng,
                cin,
                cout,
                1,
                stride,
                0,
                false,
                0.0,
                trainable,
            )
        });
        ConvBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward_eval(tape, &h)?;
        let h = ops::gelu(tape, &h)?;
        let h = self.conv2.forward(tape, &h)?;
        let h = self.bn2.forward_eval(tape, &h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(tape, x)?,
            None => x.clone(),
        };
        let sum = ops::add(tape, &h, &s)?;
        ops::gelu(tape, &sum)
    }

    fn params(&self) -> Vec<&Param<P>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some(s) = &self.shortcut {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some(s) = &mut self.shortcut {
            v.extend(s.params_mut());
        }
        v
    }
}

/// Frozen convolutional encoder: stem conv (stride 2) then four stages of
/// residual blocks with stride-2 entries.
#[derive(Clone, Debug)]
pub struct TeacherLocal<P: Real> {
    pub config: EncoderConfig,
    stem: Conv2d<P>,
    stem_bn: BatchNorm<P>,
    stages: Vec<Vec<ConvBlock<P>>>,
}

impl<P: Real> TeacherLocal<P> {
    fn init(config: &EncoderConfig, rng: &mut Stream) -> Self {
        let c1 = config.stage_channels[0];
        let stem = Conv2d::init(
            "teacher_local.stem",
            rng,
            config.in_channels,
            c1,
            3,
            2,
            1,
            false,
            0.0,
            false,
        );
        let stem_bn = BatchNorm::init("teacher_local.stem_bn", c1, false);
        let mut stages = Vec::with_capacity(4);
        let mut cin = c1;
        for (si, &cout) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for bi in 0..config.blocks_per_stage {
                let (bc_in, stride) = if bi == 0 { (cin, 2) } else { (cout, 1) };
                blocks.push(ConvBlock::init(
                    &format!("teacher_local.stage{}.block{}", si + 1, bi),
                    rng,
                    bc_in,
                    cout,
                    stride,
                    false,
                ));
            }
            stages.push(blocks);
            cin = cout;
        }
        TeacherLocal {
            config: *config,
            stem,
            stem_bn,
            stages,
        }
    }

    pub fn forward(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<FeaturePyramid<P>> {
        let (_, c, h, w) = x.dims4("teacher_forward")?;
        if (h, w) != self.config.input_size || c != self.config.in_channels {
            return Err(Error::shape(
                "teacher_forward",
                format!(
                    "input {:?} does not match config ({}, {:?})",
                    x.shape(),
                    self.config.in_channels,
                    self.config.input_size
                ),
            ));
        }
        let mut h = self.stem.forward(tape, x)?;
        h = self.stem_bn.forward_eval(tape, &h)?;
        h = ops::gelu(tape, &h)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(tape, &h)?;
            }
            outs.push(h.clone());
        }
        let arr: [Tensor<P>; 4] = outs.try_into().expect("four stages");
        Ok(FeaturePyramid::new(arr))
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        let mut v = self.stem.params();
        v.extend(self.stem_bn.params());
        for stage in &self.stages {
            for b in stage {
                v.extend(b.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_bn.params_mut());
        for stage in &mut self.stages {
            for b in stage {
                v.extend(b.params_mut());
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Global (sequence-scan) teacher
// ---------------------------------------------------------------------------

/// Bidirectional exponential-decay scan plus a pointwise channel mix.
/// The scan runs over the row-major flattened spatial grid with the
/// normalized update s_t = a⊙s_{t-1} + (1-a)⊙x_t (unit DC gain, so feature
/// scale stays comparable to the conv branch across stages); a second scan
/// runs in the reversed direction, the two are averaged, and an orthogonal
/// channel mix is applied per position.
#[derive(Clone, Debug)]
struct ScanMixer<P: Real> {
    gate: Param<P>,  // [C], entries in (0, 1)
    mix_w: Param<P>, // [C, C]
    mix_b: Param<P>, // [C]
}

impl<P: Real> ScanMixer<P> {
    fn init(name: &str, rng: &mut Stream, c: usize) -> Self {
        let gate: Vec<P> = (0..c)
            .map(|_| {
                let z = 1.0 + 0.5 * rng.normal(); // N(1, 0.25)
                P::from_f64(1.0 / (1.0 + libm::exp(-z)))
            })
            .collect();
        let mix = orthogonal(rng, c);
        let bias: Vec<P> = (0..c).map(|_| P::from_f64(rng.normal() * 0.1)).collect();
        ScanMixer {
            gate: Param::new(
                format!("{name}.gate"),
                Tensor::from_vec(vec![c], gate).expect("gate shape"),
                false,
            ),
            mix_w: Param::new(
                format!("{name}.mix_w"),
                Tensor::from_vec(vec![c, c], mix).expect("mix shape"),
                false,
            ),
            mix_b: Param::new(
                format!("{name}.mix_b"),
                Tensor::from_vec(vec![c], bias).expect("mix bias shape"),
                false,
            ),
        }
    }

    /// Pure forward; the mixer is frozen so nothing is recorded.
    fn forward(&self, x: &Tensor<P>) -> Result<Tensor<P>> {
        const OP: &str = "scan_mix";
        let (n, c, h, w) = x.dims4(OP)?;
        let l = h * w;
        let gate = self.gate.value().data();
        let mut y = vec![P::ZERO; x.numel()];
        let half = P::from_f64(0.5);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * l;
                let src = &x.data()[base..base + l];
                let dst = &mut y[base..base + l];
                let a = gate[ci];
                let gain = P::ONE - a;
                let mut s = P::ZERO;
                for t in 0..l {
                    s = a * s + gain * src[t];
                    dst[t] = s;
                }
                s = P::ZERO;
                for t in (0..l).rev() {
                    s = a * s + gain * src[t];
                    dst[t] = half * (dst[t] + s);
                }
            }
        }
        // Pointwise channel mix: z[:, p] = W · y[:, p] + b. The per-sample
        // [C, L] layout is exactly a [C×C]·[C×L] matmul.
        let wm = self.mix_w.value().data();
        let bias = self.mix_b.value().data();
        let mut z = vec![P::ZERO; x.numel()];
        for ni in 0..n {
            let zn = &mut z[ni * c * l..(ni + 1) * c * l];
            for ci in 0..c {
                zn[ci * l..(ci + 1) * l].fill(bias[ci]);
            }
            crate::ops::kernels::matmul_acc(zn, wm, &y[ni * c * l..(ni + 1) * c * l], c, c, l);
        }
        let out = Tensor::from_vec(vec![n, c, h, w], z)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { op: OP });
        }
        Ok(out)
    }

    fn params(&self) -> Vec<&Param<P>> {
        vec![&self.gate, &self.mix_w, &self.mix_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        vec![&mut self.gate, &mut self.mix_w, &mut self.mix_b]
    }
}

/// Orthogonal matrix via modified Gram-Schmidt on a Gaussian draw.
fn orthogonal<P: Real>(rng: &mut Stream, c: usize) -> Vec<P> {
    let mut rows: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..c).map(|_| rng.normal()).collect())
        .collect();
    for i in 0..c {
        for j in 0..i {
            let proj: f64 = (0..c).map(|k| rows[i][k] * rows[j][k]).sum();
            for k in 0..c {
                rows[i][k] -= proj * rows[j][k];
            }
        }
        let norm: f64 = (0..c).map(|k| rows[i][k] * rows[i][k]).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "degenerate draw in orthogonal init");
        for k in 0..c {
            rows[i][k] /= norm;
        }
    }
    rows.into_iter()
        .flat_map(|r| r.into_iter().map(P::from_f64))
        .collect()
}

/// Frozen sequence-scan encoder: patch-embed stem, then per stage a stride-2
/// downsample conv followed by scan-mixer blocks.
#[derive(Clone, Debug)]
pub struct TeacherGlobal<P: Real> {
    pub config: EncoderConfig,
    stem: Conv2d<P>,
    downs: Vec<Conv2d<P>>,
    stages: Vec<Vec<ScanMixer<P>>>,
}

impl<P: Real> TeacherGlobal<P> {
    fn init(config: &EncoderConfig, rng: &mut Stream) -> Self {
        let c1 = config.stage_channels[0];
        let stem = Conv2d::init(
            "teacher_global.stem",
            rng,
            config.in_channels,
            c1,
            2,
            2,
            0,
            false,
            0.0,
            false,
        );
        let mut downs = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        let mut cin = c1;
        for (si, &cout) in config.stage_channels.iter().enumerate() {
            downs.push(Conv2d::init(
                &format!("teacher_global.down{}", si + 1),
                rng,
                cin,
                cout,
                2,
                2,
                0,
                false,
                0.0,
                false,
            ));
            let blocks = (0..config.blocks_per_stage)
                .map(|bi| {
                    ScanMixer::init(
                        &format!("teacher_global.stage{}.mixer{}", si + 1, bi),
                        rng,
                        cout,
                    )
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        TeacherGlobal {
            config: *config,
            stem,
            downs,
            stages,
        }
    }

    pub fn forward(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<FeaturePyramid<P>> {
        let (_, c, h, w) = x.dims4("teacher_forward")?;
        if (h, w) != self.config.input_size || c != self.config.in_channels {
            return Err(Error::shape(
                "teacher_forward",
                format!(
                    "input {:?} does not match config ({}, {:?})",
                    x.shape(),
                    self.config.in_channels,
                    self.config.input_size
                ),
            ));
        }
        let mut h = self.stem.forward(tape, x)?;
        h = ops::gelu(tape, &h)?;
        let mut outs = Vec::with_capacity(4);
        for (down, blocks) in self.downs.iter().zip(self.stages.iter()) {
            h = down.forward(tape, &h)?;
            h = ops::gelu(tape, &h)?;
            for block in blocks {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
        }
        let arr: [Tensor<P>; 4] = outs.try_into().expect("four stages");
        Ok(FeaturePyramid::new(arr))
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        let mut v = self.stem.params();
        for d in &self.downs {
            v.extend(d.params());
        }
        for stage in &self.stages {
            for b in stage {
                v.extend(b.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = self.stem.params_mut();
        for d in &mut self.downs {
            v.extend(d.params_mut());
        }
        for stage in &mut self.stages {
            for b in stage {
                v.extend(b.params_mut());
            }
        }
        v
    }
}

/// Build both frozen teachers from independent seeded streams. Every
/// parameter has `trainable == false`, so teachers can never receive
/// gradients; BN statistics are fixed at (mean 0, var 1).
pub fn init_frozen_teachers<P: Real>(
    config: &EncoderConfig,
) -> Result<(TeacherLocal<P>, TeacherGlobal<P>)> {
    config.validate()?;
    let mut rng_local = Stream::derive(config.seed, "teacher_local", 0);
    let mut rng_global = Stream::derive(config.seed, "teacher_global", 0);
    let local = TeacherLocal::init(config, &mut rng_local);
    let global = TeacherGlobal::init(config, &mut rng_global);
    Ok((local, global))
}

/// 64-bit fingerprint of a parameter list (little-endian f32 payload), used
/// to assert teachers never change.
pub fn params_digest<P: Real>(params: &[&Param<P>]) -> u64 {
    let mut d = crate::digest::Digest64::new();
    for p in params {
        d.update(p.name().as_bytes());
        for v in p.value().data() {
            d.update(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    d.finish()
}

// ---------------------------------------------------------------------------
// Student decoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StudentStage<P: Real> {
    upsample: bool,
    conv1: Conv2d<P>,
    bn: BatchNorm<P>,
    conv2: Conv2d<P>,
}

impl<P: Real> StudentStage<P> {
    fn init(name: &str, rng: &mut Stream, cin: usize, cout: usize, upsample: bool) -> Self {
        StudentStage {
            upsample,
            conv1: Conv2d::init(&format!("{name}.conv1"), rng, cin, cout, 3, 1, 1, true, 0.0, true),
            bn: BatchNorm::init(&format!("{name}.bn"), cout, true),
            conv2: Conv2d::init(&format!("{name}.conv2"), rng, cout, cout, 3, 1, 1, true, 0.0, true),
        }
    }

    fn forward_train(&mut self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        let x = self.maybe_upsample(tape, x)?;
        let h = self.conv1.forward(tape, &x)?;
        let h = self.bn.forward_train(tape, &h)?;
        let h = ops::gelu(tape, &h)?;
        self.conv2.forward(tape, &h)
    }

    fn forward_eval(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        let x = self.maybe_upsample(tape, x)?;
        let h = self.conv1.forward(tape, &x)?;
        let h = self.bn.forward_eval(tape, &h)?;
        let h = ops::gelu(tape, &h)?;
        self.conv2.forward(tape, &h)
    }

    fn maybe_upsample(&self, tape: &mut Tape<P>, x: &Tensor<P>) -> Result<Tensor<P>> {
        if self.upsample {
            let (_, _, h, w) = x.dims4("student_forward")?;
            ops::bilinear_resize(tape, x, h * 2, w * 2)
        } else {
            Ok(x.clone())
        }
    }
}

/// Mirror decoder, deep to shallow. `F^4` is produced at the bottleneck
/// resolution before any upsampling; stages 3..1 each upsample x2. Optional
/// per-stage skips are added to the stage-boundary tensor at the matching
/// resolution, so a provided skip shifts both the emitted feature and the
/// next stage's input.
#[derive(Clone, Debug)]
pub struct StudentDecoder<P: Real> {
    pub name: String,
    stage4: StudentStage<P>,
    stage3: StudentStage<P>,
    stage2: StudentStage<P>,
    stage1: StudentStage<P>,
}

/// Skip tensors for stages 3, 2, 1 (deep to shallow).
pub type StudentSkips<P> = [Option<Tensor<P>>; 3];

pub fn no_skips<P: Real>() -> StudentSkips<P> {
    [None, None, None]
}

impl<P: Real> StudentDecoder<P> {
    pub fn init(name: &str, config: &EncoderConfig, rng: &mut Stream) -> Self {
        let [c1, c2, c3, c4] = config.stage_channels;
        StudentDecoder {
            name: name.to_string(),
            stage4: StudentStage::init(&format!("{name}.stage4"), rng, c4, c4, false),
            stage3: StudentStage::init(&format!("{name}.stage3"), rng, c4, c3, true),
            stage2: StudentStage::init(&format!("{name}.stage2"), rng, c3, c2, true),
            stage1: StudentStage::init(&format!("{name}.stage1"), rng, c2, c1, true),
        }
    }

    fn inject(
        tape: &mut Tape<P>,
        h: Tensor<P>,
        skip: &Option<Tensor<P>>,
        stage: usize,
    ) -> Result<Tensor<P>> {
        match skip {
            None => Ok(h),
            Some(z) => {
                if z.shape() != h.shape() {
                    return Err(Error::shape(
                        "student_forward",
                        format!(
                            "skip for stage {stage} has shape {:?}, expected {:?}",
                            z.shape(),
                            h.shape()
                        ),
                    ));
                }
                ops::add(tape, &h, z)
            }
        }
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape<P>,
        bottleneck: &Tensor<P>,
        skips: &StudentSkips<P>,
    ) -> Result<FeaturePyramid<P>> {
        let f4 = self.stage4.forward_train(tape, bottleneck)?;
        let h3 = self.stage3.forward_train(tape, &f4)?;
        let f3 = Self::inject(tape, h3, &skips[0], 3)?;
        let h2 = self.stage2.forward_train(tape, &f3)?;
        let f2 = Self::inject(tape, h2, &skips[1], 2)?;
        let h1 = self.stage1.forward_train(tape, &f2)?;
        let f1 = Self::inject(tape, h1, &skips[2], 1)?;
        Ok(FeaturePyramid::new([f1, f2, f3, f4]))
    }

    pub fn forward_eval(
        &self,
        tape: &mut Tape<P>,
        bottleneck: &Tensor<P>,
        skips: &StudentSkips<P>,
    ) -> Result<FeaturePyramid<P>> {
        let f4 = self.stage4.forward_eval(tape, bottleneck)?;
        let h3 = self.stage3.forward_eval(tape, &f4)?;
        let f3 = Self::inject(tape, h3, &skips[0], 3)?;
        let h2 = self.stage2.forward_eval(tape, &f3)?;
        let f2 = Self::inject(tape, h2, &skips[1], 2)?;
        let h1 = self.stage1.forward_eval(tape, &f2)?;
        let f1 = Self::inject(tape, h1, &skips[2], 1)?;
        Ok(FeaturePyramid::new([f1, f2, f3, f4]))
    }

    fn stages(&self) -> [&StudentStage<P>; 4] {
        [&self.stage4, &self.stage3, &self.stage2, &self.stage1]
    }

    fn stages_mut(&mut self) -> [&mut StudentStage<P>; 4] {
        [
            &mut self.stage4,
            &mut self.stage3,
            &mut self.stage2,
            &mut self.stage1,
        ]
    }

    pub fn params(&self) -> Vec<&Param<P>> {
        let mut v = Vec::new();
        for s in self.stages() {
            v.extend(s.conv1.params());
            v.extend(s.bn.params());
            v.extend(s.conv2.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = Vec::new();
        for s in self.stages_mut() {
            v.extend(s.conv1.params_mut());
            v.extend(s.bn.params_mut());
            v.extend(s.conv2.params_mut());
        }
        v
    }

    pub fn states(&self) -> Vec<(String, &[P])> {
        self.stages().iter().flat_map(|s| s.bn.states()).collect()
    }

    pub fn states_mut(&mut self) -> Vec<(String, &mut Vec<P>)> {
        let mut v = Vec::new();
        for s in self.stages_mut() {
            v.extend(s.bn.states_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_size: (32, 32),
            in_channels: 1,
            stage_channels: [4, 8, 12, 16],
            blocks_per_stage: 1,
            seed: 42,
        }
    }

    fn image(config: &EncoderConfig, seed: u64) -> Tensor<f64> {
        let (h, w) = config.input_size;
        let mut s = Stream::from_seed(seed);
        let data: Vec<f64> = (0..h * w * config.in_channels)
            .map(|_| s.uniform(0.0, 1.0))
            .collect();
        Tensor::from_vec(vec![1, config.in_channels, h, w], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(small_config().validate().is_ok());
        let mut bad = small_config();
        bad.input_size = (48, 64);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_gives_identical_teachers() {
        let cfg = small_config();
        let (a1, a2) = init_frozen_teachers::<f32>(&cfg).unwrap();
        let (b1, b2) = init_frozen_teachers::<f32>(&cfg).unwrap();
        assert_eq!(params_digest(&a1.params()), params_digest(&b1.params()));
        assert_eq!(params_digest(&a2.params()), params_digest(&b2.params()));
    }

    #[test]
    fn different_seed_changes_teachers() {
        let cfg = small_config();
        let mut other = cfg;
        other.seed = 43;
        let (a1, _) = init_frozen_teachers::<f32>(&cfg).unwrap();
        let (b1, _) = init_frozen_teachers::<f32>(&other).unwrap();
        assert_ne!(params_digest(&a1.params()), params_digest(&b1.params()));
    }

    #[test]
    fn teachers_are_fully_frozen() {
        let cfg = small_config();
        let (t1, t2) = init_frozen_teachers::<f32>(&cfg).unwrap();
        assert!(t1.params().iter().all(|p| !p.trainable()));
        assert!(t2.params().iter().all(|p| !p.trainable()));
    }

    #[test]
    fn pyramid_shapes_follow_config() {
        let cfg = small_config();
        let (t1, t2) = init_frozen_teachers::<f64>(&cfg).unwrap();
        let x = image(&cfg, 1);
        let mut tape = Tape::new();
        let p1 = t1.forward(&mut tape, &x).unwrap();
        let p2 = t2.forward(&mut tape, &x).unwrap();
        for i in 1..=4 {
            assert_eq!(p1.stage(i).shape(), cfg.stage_shape(i, 1).as_slice());
            assert_eq!(p2.stage(i).shape(), cfg.stage_shape(i, 1).as_slice());
        }
        // Teachers are constants: nothing recorded.
        assert!(tape.is_empty());
    }

    #[test]
    fn teacher_forward_is_deterministic() {
        let cfg = small_config();
        let (t1, t2) = init_frozen_teachers::<f32>(&cfg).unwrap();
        let x = image(&cfg, 2).cast::<f32>();
        let mut tape = Tape::new();
        let a = t2.forward(&mut tape, &x).unwrap();
        let b = t2.forward(&mut tape, &x).unwrap();
        let c = t1.forward(&mut tape, &x).unwrap();
        let d = t1.forward(&mut tape, &x).unwrap();
        for i in 1..=4 {
            assert_eq!(a.stage(i).data(), b.stage(i).data());
            assert_eq!(c.stage(i).data(), d.stage(i).data());
        }
    }

    #[test]
    fn zero_input_is_finite_and_global_stage1_constant_rows() {
        let cfg = small_config();
        let (_, t2) = init_frozen_teachers::<f64>(&cfg).unwrap();
        let (h, w) = cfg.input_size;
        let x = Tensor::zeros(vec![1, 1, h, w]);
        let mut tape = Tape::new();
        let p = t2.forward(&mut tape, &x).unwrap();
        let s1 = p.stage(1);
        assert!(s1.all_finite());
        // Zero input leaves only bias terms, which are spatially constant.
        let (_, c, sh, sw) = s1.dims4("test").unwrap();
        for ci in 0..c {
            let base = ci * sh * sw;
            let v0 = s1.data()[base];
            for p in 0..sh * sw {
                assert!(
                    (s1.data()[base + p] - v0).abs() < 1e-9,
                    "channel {ci} not constant"
                );
            }
        }
    }

    #[test]
    fn global_teacher_mixes_every_position() {
        // Long-range dependency: one perturbed pixel must reach every
        // stage-4 output position.
        let cfg = small_config();
        let (_, t2) = init_frozen_teachers::<f64>(&cfg).unwrap();
        let x = image(&cfg, 3);
        let mut bumped = x.data().to_vec();
        bumped[5 * 32 + 7] += 1.0;
        let xb = Tensor::from_vec(x.shape().to_vec(), bumped).unwrap();
        let mut tape = Tape::new();
        let a = t2.forward(&mut tape, &x).unwrap();
        let b = t2.forward(&mut tape, &xb).unwrap();
        let s4a = a.stage(4);
        let s4b = b.stage(4);
        let (_, c, h, w) = s4a.dims4("test").unwrap();
        for p in 0..h * w {
            let any_changed = (0..c).any(|ci| {
                let i = ci * h * w + p;
                (s4a.data()[i] - s4b.data()[i]).abs() > 0.0
            });
            assert!(any_changed, "position {p} saw no change");
        }
    }

    #[test]
    fn local_teacher_has_bounded_stage1_receptive_field() {
        let cfg = small_config();
        let (t1, _) = init_frozen_teachers::<f64>(&cfg).unwrap();
        let x = image(&cfg, 4);
        let (py, px) = (16usize, 16usize);
        let mut bumped = x.data().to_vec();
        bumped[py * 32 + px] += 1.0;
        let xb = Tensor::from_vec(x.shape().to_vec(), bumped).unwrap();
        let mut tape = Tape::new();
        let a = t1.forward(&mut tape, &x).unwrap();
        let b = t1.forward(&mut tape, &xb).unwrap();
        let s1a = a.stage(1);
        let s1b = b.stage(1);
        let (_, c, h, w) = s1a.dims4("test").unwrap();
        // Receptive-field chain: stem k3 s2 -> entry k3 s2 -> conv k3 s1 gives
        // a 15x15 input window (jump 4), so an input pixel influences stage-1
        // outputs within Chebyshev radius ceil(7/4) = 2 of (p/4).
        let radius = 2isize;
        let (cy, cx) = ((py / 4) as isize, (px / 4) as isize);
        for oy in 0..h {
            for ox in 0..w {
                let inside = (oy as isize - cy).abs() <= radius
                    && (ox as isize - cx).abs() <= radius;
                if inside {
                    continue;
                }
                for ci in 0..c {
                    let i = ci * h * w + oy * w + ox;
                    assert_eq!(
                        s1a.data()[i], s1b.data()[i],
                        "leak outside receptive field at ({oy},{ox})"
                    );
                }
            }
        }
    }

    #[test]
    fn student_shapes_mirror_teacher_and_zero_skips_are_identity() {
        let cfg = small_config();
        let mut rng = Stream::derive(7, "student", 0);
        let mut student = StudentDecoder::<f64>::init("s1", &cfg, &mut rng);
        let mut s = Stream::from_seed(9);
        let bott_shape = cfg.stage_shape(4, 2);
        let bott_numel: usize = bott_shape.iter().product();
        let bott = Tensor::from_vec(
            bott_shape,
            (0..bott_numel).map(|_| s.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = student.forward_train(&mut tape, &bott, &no_skips()).unwrap();
        for i in 1..=4 {
            assert_eq!(p.stage(i).shape(), cfg.stage_shape(i, 2).as_slice());
        }
        // All-zero skips are bitwise identical to no skips (running BN stats
        // are reset between calls by re-initializing the student).
        let mut rng2 = Stream::derive(7, "student", 0);
        let mut student2 = StudentDecoder::<f64>::init("s1", &cfg, &mut rng2);
        let zero_skips: StudentSkips<f64> = [
            Some(Tensor::zeros(cfg.stage_shape(3, 2))),
            Some(Tensor::zeros(cfg.stage_shape(2, 2))),
            Some(Tensor::zeros(cfg.stage_shape(1, 2))),
        ];
        let q = student2
            .forward_train(&mut tape, &bott, &zero_skips)
            .unwrap();
        for i in 1..=4 {
            assert_eq!(p.stage(i).data(), q.stage(i).data());
        }
    }

    #[test]
    fn skip_shape_mismatch_is_an_error() {
        let cfg = small_config();
        let mut rng = Stream::derive(7, "student", 0);
        let mut student = StudentDecoder::<f64>::init("s1", &cfg, &mut rng);
        let bott = Tensor::zeros(cfg.stage_shape(4, 1));
        let bad: StudentSkips<f64> = [Some(Tensor::zeros(vec![1, 3, 4, 4])), None, None];
        let mut tape = Tape::new();
        assert!(student.forward_train(&mut tape, &bott, &bad).is_err());
    }

    #[test]
    fn gradients_reach_every_student_parameter() {
        let cfg = small_config();
        let mut rng = Stream::derive(7, "student", 0);
        let mut student = StudentDecoder::<f64>::init("s1", &cfg, &mut rng);
        let mut s = Stream::from_seed(10);
        let bott_shape = cfg.stage_shape(4, 2);
        let bott_numel: usize = bott_shape.iter().product();
        let bott = Tensor::from_vec(
            bott_shape,
            (0..bott_numel).map(|_| s.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let target_shape = cfg.stage_shape(1, 2);
        let target_numel: usize = target_shape.iter().product();
        let target = Tensor::from_vec(
            target_shape,
            (0..target_numel).map(|_| s.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = student.forward_train(&mut tape, &bott, &no_skips()).unwrap();
        let loss = crate::ops::mse(&mut tape, p.stage(1), &target).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for param in student.params() {
            let g = grads
                .for_param(param.id())
                .unwrap_or_else(|| panic!("no grad for {}", param.name()));
            assert!(
                g.iter().any(|v| *v != 0.0),
                "gradient all-zero for {}",
                param.name()
            );
        }
    }
}
