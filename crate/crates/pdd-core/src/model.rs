//! Model assembly and the training/eval forward passes.
//!
//! A `ModelBundle` wires the frozen teachers, the fusion modules and the
//! students for one of four paradigms (the full model plus the ablation
//! baselines). The `Trainer` owns the bundle, the optimizer state and the
//! per-image teacher feature cache (teachers are frozen, so their pyramids
//! are computed once per image).

use crate::backbones::{
    init_frozen_teachers, params_digest, EncoderConfig, StudentDecoder, StudentSkips,
    TeacherGlobal, TeacherLocal,
};
use crate::error::{Error, Result};
use crate::fusion::{ina_fuse, mmu_fuse, mmu_fuse_train, mpa_project, MmuBlock, MpaHead};
use crate::objectives::{loss_div, loss_kr, loss_prp, loss_total, DivThresholds, LossWeights};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::param::Param;
use crate::real::Real;
use crate::rng::Stream;
use crate::scoring::{aggregate_map, gaussian_smooth};
use crate::tape::Tape;
use crate::tensor::{FeaturePyramid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    /// Conv teacher only, single student, distillation loss only.
    Rd1t1s,
    /// Dual teachers with fusion, single student, no prior skips.
    InaMmu2t1s,
    /// Dual teachers with fusion, single student fed prior skips.
    InaMmu2t1sMpa,
    /// The full dual-teacher dual-student model.
    Full2t2s,
}

impl Paradigm {
    pub fn uses_global_teacher(&self) -> bool {
        !matches!(self, Paradigm::Rd1t1s)
    }
    pub fn uses_mpa(&self) -> bool {
        matches!(self, Paradigm::InaMmu2t1sMpa | Paradigm::Full2t2s)
    }
    pub fn has_second_student(&self) -> bool {
        matches!(self, Paradigm::Full2t2s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmuStages {
    /// A fusion block at every stage.
    All,
    /// Only the deepest stage gets a block; shallower unified features fall
    /// back to the parameter-free fusion.
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorePairs {
    /// Score each student against its fused training target.
    Fused,
    /// Score student 1 against the conv teacher and student 2 against the
    /// scan teacher directly.
    Raw,
    /// Score the two students against each other.
    StudentStudent,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub paradigm: Paradigm,
    pub mmu_stages: MmuStages,
    pub weights: LossWeights,
    pub thresholds: DivThresholds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            paradigm: Paradigm::Full2t2s,
            mmu_stages: MmuStages::All,
            weights: LossWeights::default(),
            thresholds: DivThresholds::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        self.thresholds.validate()
    }
}

pub struct ModelBundle<P: Real> {
    pub config: ModelConfig,
    pub teacher_local: TeacherLocal<P>,
    pub teacher_global: Option<TeacherGlobal<P>>,
    /// Fusion blocks; indexed by covered stage (see `mmu_stage_index`).
    pub mmu: Vec<MmuBlock<P>>,
    pub mpa: Option<MpaHead<P>>,
    pub student1: StudentDecoder<P>,
    pub student2: Option<StudentDecoder<P>>,
}

impl<P: Real> ModelBundle<P> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder;
        let (teacher_local, teacher_global_full) = init_frozen_teachers::<P>(&enc)?;
        let teacher_global = config
            .paradigm
            .uses_global_teacher()
            .then_some(teacher_global_full);

        let mut mmu = Vec::new();
        if config.paradigm.uses_global_teacher() {
            let mut rng = Stream::derive(enc.seed, "mmu", 0);
            let covered: Vec<usize> = match config.mmu_stages {
                MmuStages::All => (1..=4).collect(),
                MmuStages::Tail => vec![4],
            };
            for i in covered {
                let c = enc.stage_channels[i - 1];
                mmu.push(MmuBlock::init(&format!("mmu.stage{i}"), &mut rng, c, c));
            }
        }
        let mpa = config.paradigm.uses_mpa().then(|| {
            let mut rng = Stream::derive(enc.seed, "mpa", 0);
            MpaHead::init("mpa", &mut rng, &enc.stage_channels)
        });
        let mut rng1 = Stream::derive(enc.seed, "student1", 0);
        let student1 = StudentDecoder::init("student1", &enc, &mut rng1);
        let student2 = config.paradigm.has_second_student().then(|| {
            let mut rng2 = Stream::derive(enc.seed, "student2", 0);
            StudentDecoder::init("student2", &enc, &mut rng2)
        });
        Ok(ModelBundle {
            config,
            teacher_local,
            teacher_global,
            mmu,
            mpa,
            student1,
            student2,
        })
    }

    /// Index of the fusion block covering `stage`, if any.
    fn mmu_stage_index(&self, stage: usize) -> Option<usize> {
        match self.config.mmu_stages {
            MmuStages::All => (!self.mmu.is_empty()).then_some(stage - 1),
            MmuStages::Tail => (stage == 4 && !self.mmu.is_empty()).then_some(0),
        }
    }

    /// Canonical trainable parameter order shared by the optimizer and the
    /// checkpoint format: fusion blocks, projections, students.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = Vec::new();
        for block in &mut self.mmu {
            v.extend(block.params_mut());
        }
        if let Some(mpa) = &mut self.mpa {
            v.extend(mpa.params_mut());
        }
        v.extend(self.student1.params_mut());
        if let Some(s2) = &mut self.student2 {
            v.extend(s2.params_mut());
        }
        v
    }

    pub fn trainable_params(&self) -> Vec<&Param<P>> {
        let mut v = Vec::new();
        for block in &self.mmu {
            v.extend(block.params());
        }
        if let Some(mpa) = &self.mpa {
            v.extend(mpa.params());
        }
        v.extend(self.student1.params());
        if let Some(s2) = &self.student2 {
            v.extend(s2.params());
        }
        v
    }

    pub fn teacher_params(&self) -> Vec<&Param<P>> {
        let mut v = self.teacher_local.params();
        if let Some(g) = &self.teacher_global {
            v.extend(g.params());
        }
        v
    }

    /// Every parameter, frozen ones first, in a stable order.
    pub fn all_params(&self) -> Vec<&Param<P>> {
        let mut v = self.teacher_params();
        v.extend(self.trainable_params());
        v
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param<P>> {
        let mut v = self.teacher_local.params_mut();
        if let Some(g) = &mut self.teacher_global {
            v.extend(g.params_mut());
        }
        for block in &mut self.mmu {
            v.extend(block.params_mut());
        }
        if let Some(mpa) = &mut self.mpa {
            v.extend(mpa.params_mut());
        }
        v.extend(self.student1.params_mut());
        if let Some(s2) = &mut self.student2 {
            v.extend(s2.params_mut());
        }
        v
    }

    /// Non-trainable state buffers (BN running statistics), stable order.
    pub fn states(&self) -> Vec<(String, &[P])> {
        let mut v = Vec::new();
        for block in &self.mmu {
            v.extend(block.states());
        }
        v.extend(self.student1.states());
        if let Some(s2) = &self.student2 {
            v.extend(s2.states());
        }
        v
    }

    pub fn states_mut(&mut self) -> Vec<(String, &mut Vec<P>)> {
        let mut v = Vec::new();
        for block in &mut self.mmu {
            v.extend(block.states_mut());
        }
        v.extend(self.student1.states_mut());
        if let Some(s2) = &mut self.student2 {
            v.extend(s2.states_mut());
        }
        v
    }

    pub fn teacher_digest(&self) -> u64 {
        params_digest(&self.teacher_params())
    }

    /// Frozen per-image teacher features: the raw pyramids plus the fused
    /// distillation targets.
    pub fn teacher_features(&self, x: &Tensor<P>) -> Result<TeacherFeatures<P>> {
        let mut scratch = Tape::new();
        let f_c = self.teacher_local.forward(&mut scratch, x)?;
        let f_m = match &self.teacher_global {
            Some(g) => Some(g.forward(&mut scratch, x)?),
            None => None,
        };
        let f_b = match &f_m {
            Some(f_m) => {
                let mut stages = Vec::with_capacity(4);
                for i in 1..=4 {
                    stages.push(ina_fuse(&mut scratch, f_m.stage(i), f_c.stage(i))?);
                }
                FeaturePyramid::new(stages.try_into().expect("four stages"))
            }
            None => f_c.clone(),
        };
        Ok(TeacherFeatures { f_c, f_m, f_b })
    }

    /// Unified features f_t per stage. Stages without a fusion block fall
    /// back to the parameter-free fused feature (a graph constant).
    fn unified_features(
        &mut self,
        tape: &mut Tape<P>,
        feats: &TeacherFeatures<P>,
        train: bool,
    ) -> Result<FeaturePyramid<P>> {
        let Some(f_m) = &feats.f_m else {
            // Single-teacher paradigm: the conv pyramid is the unified one.
            return Ok(feats.f_c.clone());
        };
        let mut stages = Vec::with_capacity(4);
        for i in 1..=4 {
            let t = match self.mmu_stage_index(i) {
                Some(idx) => {
                    if train {
                        mmu_fuse_train(tape, f_m.stage(i), feats.f_c.stage(i), &mut self.mmu[idx])?
                    } else {
                        mmu_fuse(tape, f_m.stage(i), feats.f_c.stage(i), &self.mmu[idx])?
                    }
                }
                None => feats.f_b.stage(i).detached(),
            };
            stages.push(t);
        }
        Ok(FeaturePyramid::new(stages.try_into().expect("four stages")))
    }

    fn mpa_skips(
        &self,
        tape: &mut Tape<P>,
        unified: &FeaturePyramid<P>,
    ) -> Result<StudentSkips<P>> {
        let Some(mpa) = &self.mpa else {
            return Ok(crate::backbones::no_skips());
        };
        // Skips cover stages 3, 2, 1 (the bottleneck already carries stage 4).
        let z3 = mpa_project(tape, unified.stage(3), mpa, 3)?;
        let z2 = mpa_project(tape, unified.stage(2), mpa, 2)?;
        let z1 = mpa_project(tape, unified.stage(1), mpa, 1)?;
        Ok([Some(z3), Some(z2), Some(z1)])
    }

    /// Student pyramids at eval (running BN statistics, nothing recorded).
    pub fn student_pyramids_eval(
        &self,
        feats: &TeacherFeatures<P>,
    ) -> Result<(FeaturePyramid<P>, Option<FeaturePyramid<P>>)> {
        let mut scratch = Tape::new();
        // Eval-mode unified features without mutating BN state.
        let unified = {
            let Some(f_m) = &feats.f_m else {
                // conv-only paradigm
                return self.student_eval_from_unified(&feats.f_c, feats);
            };
            let mut stages = Vec::with_capacity(4);
            for i in 1..=4 {
                let t = match self.mmu_stage_index(i) {
                    Some(idx) => {
                        mmu_fuse(&mut scratch, f_m.stage(i), feats.f_c.stage(i), &self.mmu[idx])?
                    }
                    None => feats.f_b.stage(i).detached(),
                };
                stages.push(t);
            }
            FeaturePyramid::new(stages.try_into().expect("four stages"))
        };
        self.student_eval_from_unified(&unified, feats)
    }

    fn student_eval_from_unified(
        &self,
        unified: &FeaturePyramid<P>,
        _feats: &TeacherFeatures<P>,
    ) -> Result<(FeaturePyramid<P>, Option<FeaturePyramid<P>>)> {
        let mut scratch = Tape::new();
        let bottleneck = unified.stage(4).detached();
        match self.config.paradigm {
            Paradigm::Rd1t1s | Paradigm::InaMmu2t1s => {
                let s1 = self
                    .student1
                    .forward_eval(&mut scratch, &bottleneck, &crate::backbones::no_skips())?;
                Ok((s1, None))
            }
            Paradigm::InaMmu2t1sMpa => {
                let skips = self.mpa_skips(&mut scratch, unified)?;
                let s1 = self.student1.forward_eval(&mut scratch, &bottleneck, &skips)?;
                Ok((s1, None))
            }
            Paradigm::Full2t2s => {
                let s1 = self
                    .student1
                    .forward_eval(&mut scratch, &bottleneck, &crate::backbones::no_skips())?;
                let skips = self.mpa_skips(&mut scratch, unified)?;
                let s2 = self
                    .student2
                    .as_ref()
                    .expect("full paradigm has student 2")
                    .forward_eval(&mut scratch, &bottleneck, &skips)?;
                Ok((s1, Some(s2)))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherFeatures<P: Real> {
    pub f_c: FeaturePyramid<P>,
    pub f_m: Option<FeaturePyramid<P>>,
    /// Fused distillation targets (equals `f_c` for the conv-only paradigm).
    pub f_b: FeaturePyramid<P>,
}

impl<P: Real> TeacherFeatures<P> {
    /// Stack per-sample features into one batched set.
    pub fn stack(items: &[&TeacherFeatures<P>]) -> Result<TeacherFeatures<P>> {
        let stack_pyr = |pick: &dyn Fn(&TeacherFeatures<P>) -> &FeaturePyramid<P>| {
            let mut stages = Vec::with_capacity(4);
            for i in 1..=4 {
                let parts: Vec<&Tensor<P>> = items.iter().map(|f| pick(f).stage(i)).collect();
                stages.push(Tensor::concat0(&parts)?);
            }
            Ok::<_, Error>(FeaturePyramid::new(stages.try_into().expect("four stages")))
        };
        let f_c = stack_pyr(&|f| &f.f_c)?;
        let f_b = stack_pyr(&|f| &f.f_b)?;
        let f_m = if items.iter().all(|f| f.f_m.is_some()) {
            let mut stages = Vec::with_capacity(4);
            for i in 1..=4 {
                let parts: Vec<&Tensor<P>> = items
                    .iter()
                    .map(|f| f.f_m.as_ref().expect("checked").stage(i))
                    .collect();
                stages.push(Tensor::concat0(&parts)?);
            }
            Some(FeaturePyramid::new(stages.try_into().expect("four stages")))
        } else {
            None
        };
        Ok(TeacherFeatures { f_c, f_m, f_b })
    }
}

/// Loss values from one training step; `total` stays attached to the tape.
pub struct StepLosses<P: Real> {
    pub kr: f64,
    pub prp: f64,
    pub div: f64,
    pub total: Tensor<P>,
}

/// One forward pass over a batch: unified features, prior skips, student
/// decodes and the three losses, combined per the paradigm.
pub fn training_step<P: Real>(
    bundle: &mut ModelBundle<P>,
    tape: &mut Tape<P>,
    feats: &TeacherFeatures<P>,
) -> Result<StepLosses<P>> {
    let weights = bundle.config.weights;
    let thresholds = bundle.config.thresholds;
    let unified = bundle.unified_features(tape, feats, true)?;
    let bottleneck = unified.stage(4).clone();
    let zero = Tensor::scalar(P::ZERO);

    let (kr, prp, div) = match bundle.config.paradigm {
        Paradigm::Rd1t1s | Paradigm::InaMmu2t1s => {
            let s1 = bundle
                .student1
                .forward_train(tape, &bottleneck, &crate::backbones::no_skips())?;
            let kr = loss_kr(tape, &feats.f_b, &s1)?;
            (kr, zero.clone(), zero)
        }
        Paradigm::InaMmu2t1sMpa => {
            let skips = bundle.mpa_skips(tape, &unified)?;
            let s1 = bundle.student1.forward_train(tape, &bottleneck, &skips)?;
            let prp = loss_prp(tape, &feats.f_b, &s1, &weights)?;
            (zero.clone(), prp, zero)
        }
        Paradigm::Full2t2s => {
            let s1 = bundle
                .student1
                .forward_train(tape, &bottleneck, &crate::backbones::no_skips())?;
            let skips = bundle.mpa_skips(tape, &unified)?;
            let s2_pyr = {
                let s2 = bundle.student2.as_mut().expect("full paradigm");
                s2.forward_train(tape, &bottleneck, &skips)?
            };
            let kr = loss_kr(tape, &feats.f_b, &s1)?;
            let prp = loss_prp(tape, &feats.f_b, &s2_pyr, &weights)?;
            let div = loss_div(tape, &s1, &s2_pyr, &thresholds)?;
            (kr, prp, div)
        }
    };
    let total = loss_total(tape, &kr, &prp, &div, &weights)?;
    Ok(StepLosses {
        kr: kr.item().to_f64(),
        prp: prp.item().to_f64(),
        div: div.item().to_f64(),
        total,
    })
}

/// Smoothed anomaly maps for a batch of normalized images, [N,1,H,W].
pub fn anomaly_maps<P: Real>(
    bundle: &ModelBundle<P>,
    images: &Tensor<P>,
    score_pairs: ScorePairs,
    sigma: f64,
) -> Result<Tensor<P>> {
    let (_, _, h, w) = images.dims4("anomaly_map")?;
    let feats = bundle.teacher_features(images)?;
    let (s1, s2) = bundle.student_pyramids_eval(&feats)?;
    let raw = match score_pairs {
        ScorePairs::Fused => {
            let mut pairs = vec![(&feats.f_b, &s1)];
            if let Some(s2) = &s2 {
                pairs.push((&feats.f_b, s2));
            }
            aggregate_map(&pairs, h, w)?
        }
        ScorePairs::Raw => {
            let mut pairs = vec![(&feats.f_c, &s1)];
            if let (Some(f_m), Some(s2)) = (&feats.f_m, &s2) {
                pairs.push((f_m, s2));
            }
            aggregate_map(&pairs, h, w)?
        }
        ScorePairs::StudentStudent => {
            let Some(s2) = &s2 else {
                return Err(Error::Config(
                    "score_pairs=student_student needs a two-student paradigm".into(),
                ));
            };
            aggregate_map(&[(&s1, s2)], h, w)?
        }
    };
    gaussian_smooth(&raw, sigma)
}

#[derive(Clone, Copy, Debug)]
pub struct TrainerConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    /// Seed for batch shuffling, independent of model init.
    pub train_seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub kr: f64,
    pub prp: f64,
    pub div: f64,
    pub total: f64,
}

pub struct Trainer<P: Real> {
    pub config: TrainerConfig,
    pub bundle: ModelBundle<P>,
    pub adam: AdamState<P>,
    pub schedule: LrSchedule,
    pub steps_done: u64,
    pub epochs_done: usize,
    pub shuffle_rng: Stream,
    cache: Vec<TeacherFeatures<P>>,
}

impl<P: Real> Trainer<P> {
    /// Build the model and precompute frozen teacher features per image.
    pub fn new(config: TrainerConfig, train_images: &[Tensor<P>]) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if train_images.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let bundle = ModelBundle::init(config.model)?;
        let steps_per_epoch = train_images.len().div_ceil(config.batch_size) as u64;
        let total_steps = steps_per_epoch * config.epochs as u64;
        let schedule = LrSchedule::new(config.lr_max, config.lr_min, total_steps.max(1));
        let mut cache = Vec::with_capacity(train_images.len());
        for img in train_images {
            cache.push(bundle.teacher_features(img)?);
        }
        let mut bundle = bundle;
        let sizes: Vec<usize> = bundle
            .trainable_params_mut()
            .iter()
            .map(|p| p.value().numel())
            .collect();
        let adam = AdamState::new(config.adam, &sizes);
        Ok(Trainer {
            config,
            bundle,
            adam,
            schedule,
            steps_done: 0,
            epochs_done: 0,
            shuffle_rng: Stream::derive(config.train_seed, "batch_order", 0),
            cache,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.cache.len().div_ceil(self.config.batch_size) as u64
    }

    /// Run one epoch; returns per-epoch mean losses and the lr at the
    /// epoch's first step.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let n = self.cache.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle_rng.shuffle(&mut order);
        let epoch_lr = self.schedule.lr_at(self.steps_done)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let parts: Vec<&TeacherFeatures<P>> = chunk.iter().map(|&i| &self.cache[i]).collect();
            let feats = TeacherFeatures::stack(&parts)?;
            let mut tape = Tape::new();
            let losses = training_step(&mut self.bundle, &mut tape, &feats)?;
            let grads = tape.backward(&losses.total)?;
            #[cfg(debug_assertions)]
            for p in self.bundle.teacher_params() {
                debug_assert!(
                    grads.for_param(p.id()).is_none(),
                    "gradient leaked into frozen parameter {}",
                    p.name()
                );
            }
            let lr = self.schedule.lr_at(self.steps_done)?;
            let mut params = self.bundle.trainable_params_mut();
            adam_step(&mut params, &grads, &mut self.adam, lr)?;
            self.steps_done += 1;
            sums.0 += losses.kr;
            sums.1 += losses.prp;
            sums.2 += losses.div;
            sums.3 += losses.total.item().to_f64();
            batches += 1;
        }
        self.epochs_done += 1;
        let b = batches as f64;
        Ok(EpochStats {
            epoch: self.epochs_done,
            lr: epoch_lr,
            kr: sums.0 / b,
            prp: sums.1 / b,
            div: sums.2 / b,
            total: sums.3 / b,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_model(paradigm: Paradigm) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: (32, 32),
                in_channels: 1,
                stage_channels: [4, 6, 8, 10],
                blocks_per_stage: 1,
                seed: 42,
            },
            paradigm,
            ..Default::default()
        }
    }

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        let mut s = Stream::from_seed(seed);
        Tensor::from_vec(
            vec![n, 1, 32, 32],
            (0..n * 32 * 32)
                .map(|_| s.uniform(-1.0, 1.0) as f32)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn training_step_returns_finite_losses_for_all_paradigms() {
        for paradigm in [
            Paradigm::Rd1t1s,
            Paradigm::InaMmu2t1s,
            Paradigm::InaMmu2t1sMpa,
            Paradigm::Full2t2s,
        ] {
            let mut bundle = ModelBundle::<f32>::init(desk_model(paradigm)).unwrap();
            let x = batch(2, 5);
            let feats = bundle.teacher_features(&x).unwrap();
            let mut tape = Tape::new();
            let losses = training_step(&mut bundle, &mut tape, &feats).unwrap();
            for v in [losses.kr, losses.prp, losses.div] {
                assert!(v.is_finite());
            }
            assert!(losses.total.item().is_finite());
            assert!(losses.total.is_tracked(), "total loss must be on the tape");
        }
    }

    #[test]
    fn gradients_reach_all_trainable_params_full_model() {
        let mut bundle = ModelBundle::<f32>::init(desk_model(Paradigm::Full2t2s)).unwrap();
        let x = batch(2, 6);
        let feats = bundle.teacher_features(&x).unwrap();
        let mut tape = Tape::new();
        let losses = training_step(&mut bundle, &mut tape, &feats).unwrap();
        let grads = tape.backward(&losses.total).unwrap();
        for p in bundle.trainable_params() {
            let g = grads
                .for_param(p.id())
                .unwrap_or_else(|| panic!("no grad for {}", p.name()));
            assert!(
                g.iter().any(|v| *v != 0.0),
                "gradient identically zero for {}",
                p.name()
            );
        }
        for p in bundle.teacher_params() {
            assert!(grads.for_param(p.id()).is_none());
        }
    }

    #[test]
    fn trainer_epoch_runs_and_freezes_teachers() {
        let config = TrainerConfig {
            model: desk_model(Paradigm::Full2t2s),
            epochs: 2,
            batch_size: 3,
            lr_max: 2e-3,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            train_seed: 9,
        };
        let images: Vec<Tensor<f32>> = (0..7).map(|i| batch(1, 100 + i)).collect();
        let mut trainer = Trainer::new(config, &images).unwrap();
        let digest_before = trainer.bundle.teacher_digest();
        let s1 = trainer.run_epoch().unwrap();
        let s2 = trainer.run_epoch().unwrap();
        assert_eq!(trainer.bundle.teacher_digest(), digest_before);
        assert!(s1.total.is_finite() && s2.total.is_finite());
        assert_eq!(trainer.steps_done, 2 * 3); // ceil(7/3) = 3 per epoch
        assert_eq!(s1.lr, 2e-3);
    }

    #[test]
    fn trainer_is_deterministic_across_runs() {
        let config = TrainerConfig {
            model: desk_model(Paradigm::Full2t2s),
            epochs: 2,
            batch_size: 2,
            lr_max: 2e-3,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            train_seed: 11,
        };
        let images: Vec<Tensor<f32>> = (0..4).map(|i| batch(1, 200 + i)).collect();
        let run = || {
            let mut t = Trainer::new(config, &images).unwrap();
            let mut stats = Vec::new();
            for _ in 0..2 {
                stats.push(t.run_epoch().unwrap());
            }
            let params: Vec<Vec<f32>> = t
                .bundle
                .trainable_params()
                .iter()
                .map(|p| p.value().data().to_vec())
                .collect();
            (stats, params)
        };
        let (stats_a, params_a) = run();
        let (stats_b, params_b) = run();
        for (a, b) in stats_a.iter().zip(stats_b.iter()) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.kr.to_bits(), b.kr.to_bits());
        }
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn anomaly_maps_have_input_resolution_and_score_pairs_validate() {
        let bundle = ModelBundle::<f32>::init(desk_model(Paradigm::Full2t2s)).unwrap();
        let x = batch(2, 7);
        for sp in [ScorePairs::Fused, ScorePairs::Raw, ScorePairs::StudentStudent] {
            let maps = anomaly_maps(&bundle, &x, sp, 4.0).unwrap();
            assert_eq!(maps.shape(), &[2, 1, 32, 32]);
            assert!(maps.all_finite());
        }
        let single = ModelBundle::<f32>::init(desk_model(Paradigm::Rd1t1s)).unwrap();
        assert!(anomaly_maps(&single, &x, ScorePairs::StudentStudent, 4.0).is_err());
        let maps = anomaly_maps(&single, &x, ScorePairs::Fused, 0.0).unwrap();
        assert_eq!(maps.shape(), &[2, 1, 32, 32]);
    }
}
