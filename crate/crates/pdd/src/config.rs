//! JSON run configuration. Unknown keys are rejected; every field has a
//! default, so `{}` is the desk-scale default run. The 64-bit digest of the
//! canonical serialization is embedded in every output artifact.

use serde::{Deserialize, Serialize};

use pdd_core::backbones::EncoderConfig;
use pdd_core::data::SyntheticSpec;
use pdd_core::digest::digest_bytes;
use pdd_core::model::{MmuStages, ModelConfig, Paradigm, ScorePairs};
use pdd_core::objectives::{DivThresholds, LossWeights};
use pdd_core::optim::AdamConfig;
use pdd_core::scoring::ScoreReduction;

use crate::error::{AppError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub encoder: EncoderSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub div: DivSection,
    pub train: TrainSection,
    pub synthetic: SyntheticSection,
    pub scoring: ScoringSection,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            encoder: EncoderSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            div: DivSection::default(),
            train: TrainSection::default(),
            synthetic: SyntheticSection::default(),
            scoring: ScoringSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            input_size: [e.input_size.0, e.input_size.1],
            in_channels: e.in_channels,
            stage_channels: e.stage_channels,
            blocks_per_stage: e.blocks_per_stage,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// rd_1t1s | ina_mmu_2t1s | ina_mmu_2t1s_mpa | full_2t2s
    pub paradigm: String,
    /// all | tail
    pub mmu_stages: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            paradigm: "full_2t2s".into(),
            mmu_stages: "all".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_kr: f64,
    pub lambda_prp: f64,
    pub lambda_div: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda_kr: w.lambda_kr,
            lambda_prp: w.lambda_prp,
            lambda_div: w.lambda_div,
            alpha: w.alpha,
            beta: w.beta,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DivSection {
    pub tau_low: f64,
    pub tau_high: f64,
    pub l_low: usize,
}

impl Default for DivSection {
    fn default() -> Self {
        let t = DivThresholds::default();
        DivSection {
            tau_low: t.tau_low,
            tau_high: t.tau_high,
            l_low: t.l_low,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Seeds model init and batch order.
    pub seed: u64,
    /// f32 | f64 (f64 is the gradient-check mode; checkpoints store f32).
    pub precision: String,
    /// When false (default) the TrainLog seconds column is written as 0 so
    /// logs are byte-reproducible; set true to record wall time.
    pub log_timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 8,
            lr_max: 2e-3,
            lr_min: 0.0,
            seed: 42,
            precision: "f32".into(),
            log_timing: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub height: usize,
    pub width: usize,
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    pub blob_count: usize,
    pub lesion_radius: [f64; 2],
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SyntheticSection {
            height: s.height,
            width: s.width,
            n_train_normal: s.n_train_normal,
            n_test_normal: s.n_test_normal,
            n_test_abnormal: s.n_test_abnormal,
            blob_count: s.blob_count,
            lesion_radius: [s.lesion_radius.0, s.lesion_radius.1],
            lesion_contrast: s.lesion_contrast,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub smoothing_sigma: f64,
    /// max | mean
    pub image_score: String,
    /// fused | raw | student_student
    pub score_pairs: String,
    /// Also emit raw little-endian f32 maps next to the PGMs.
    pub emit_raw_maps: bool,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection {
            smoothing_sigma: 4.0,
            image_score: "max".into(),
            score_pairs: "fused".into(),
            emit_raw_maps: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text)
            .map_err(|e| AppError::Config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical serialization (struct field order, compact separators).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> u64 {
        digest_bytes(self.canonical_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.paradigm()?;
        self.mmu_stages()?;
        self.precision()?;
        self.score_pairs()?;
        self.score_reduction()?;
        if self.train.batch_size == 0 {
            return Err(AppError::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.train.lr_max.is_finite() && self.train.lr_max > 0.0) {
            return Err(AppError::Config("train.lr_max must be positive".into()));
        }
        if self.train.lr_min < 0.0 || self.train.lr_min > self.train.lr_max {
            return Err(AppError::Config(
                "train.lr_min must lie in [0, lr_max]".into(),
            ));
        }
        if self.scoring.smoothing_sigma < 0.0 {
            return Err(AppError::Config(
                "scoring.smoothing_sigma must be >= 0".into(),
            ));
        }
        self.encoder_config().validate().map_err(AppError::from)?;
        self.loss_weights().validate().map_err(AppError::from)?;
        self.div_thresholds().validate().map_err(AppError::from)?;
        self.synthetic_spec().validate().map_err(AppError::from)?;
        Ok(())
    }

    pub fn paradigm(&self) -> Result<Paradigm> {
        match self.model.paradigm.as_str() {
            "rd_1t1s" => Ok(Paradigm::Rd1t1s),
            "ina_mmu_2t1s" => Ok(Paradigm::InaMmu2t1s),
            "ina_mmu_2t1s_mpa" => Ok(Paradigm::InaMmu2t1sMpa),
            "full_2t2s" => Ok(Paradigm::Full2t2s),
            other => Err(AppError::Config(format!(
                "model.paradigm: unknown value `{other}`"
            ))),
        }
    }

    pub fn mmu_stages(&self) -> Result<MmuStages> {
        match self.model.mmu_stages.as_str() {
            "all" => Ok(MmuStages::All),
            "tail" => Ok(MmuStages::Tail),
            other => Err(AppError::Config(format!(
                "model.mmu_stages: unknown value `{other}`"
            ))),
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.train.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(AppError::Config(format!(
                "train.precision: unknown value `{other}`"
            ))),
        }
    }

    pub fn score_pairs(&self) -> Result<ScorePairs> {
        match self.scoring.score_pairs.as_str() {
            "fused" => Ok(ScorePairs::Fused),
            "raw" => Ok(ScorePairs::Raw),
            "student_student" => Ok(ScorePairs::StudentStudent),
            other => Err(AppError::Config(format!(
                "scoring.score_pairs: unknown value `{other}`"
            ))),
        }
    }

    pub fn score_reduction(&self) -> Result<ScoreReduction> {
        match self.scoring.image_score.as_str() {
            "max" => Ok(ScoreReduction::Max),
            "mean" => Ok(ScoreReduction::Mean),
            other => Err(AppError::Config(format!(
                "scoring.image_score: unknown value `{other}`"
            ))),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: (self.encoder.input_size[0], self.encoder.input_size[1]),
            in_channels: self.encoder.in_channels,
            stage_channels: self.encoder.stage_channels,
            blocks_per_stage: self.encoder.blocks_per_stage,
            seed: self.train.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_kr: self.loss.lambda_kr,
            lambda_prp: self.loss.lambda_prp,
            lambda_div: self.loss.lambda_div,
            alpha: self.loss.alpha,
            beta: self.loss.beta,
        }
    }

    pub fn div_thresholds(&self) -> DivThresholds {
        DivThresholds {
            tau_low: self.div.tau_low,
            tau_high: self.div.tau_high,
            l_low: self.div.l_low,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            height: self.synthetic.height,
            width: self.synthetic.width,
            n_train_normal: self.synthetic.n_train_normal,
            n_test_normal: self.synthetic.n_test_normal,
            n_test_abnormal: self.synthetic.n_test_abnormal,
            blob_count: self.synthetic.blob_count,
            lesion_radius: (self.synthetic.lesion_radius[0], self.synthetic.lesion_radius[1]),
            lesion_contrast: self.synthetic.lesion_contrast,
            seed: self.synthetic.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: self.encoder_config(),
            paradigm: self.paradigm()?,
            mmu_stages: self.mmu_stages()?,
            weights: self.loss_weights(),
            thresholds: self.div_thresholds(),
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default_config() {
        let cfg = ConfigFile::from_json("{}").unwrap();
        assert_eq!(cfg, ConfigFile::default());
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.lr_max, 2e-3);
        assert_eq!(cfg.loss.lambda_div, 0.5);
        assert_eq!(cfg.div.tau_low, 0.30);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigFile::from_json(r#"{"not_a_key": 1}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"train": {"epochs": 5, "oops": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ConfigFile::from_json(r#"{"synthetic": {"lesion_contrast": 0.0}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("lesion_contrast"), "{err}");
        let err = ConfigFile::from_json(r#"{"model": {"paradigm": "bogus"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("paradigm"), "{err}");
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ConfigFile::from_json("{}").unwrap();
        let b = ConfigFile::from_json(r#"{"train": {"seed": 43}}"#).unwrap();
        assert_eq!(a.digest(), ConfigFile::default().digest());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn canonical_json_round_trips() {
        let a = ConfigFile::from_json(r#"{"train": {"epochs": 7}}"#).unwrap();
        let b = ConfigFile::from_json(&a.canonical_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.canonical_json(), b.canonical_json());
    }
}
