//! Core library for PDD, a dual-teacher / dual-student reverse-distillation
//! anomaly detector: a minimal dense-tensor engine with reverse-mode
//! differentiation, the frozen teacher and trainable student backbones, the
//! feature-fusion modules, training objectives, synthetic data generation,
//! and anomaly scoring with ranking metrics.
//!
//! Everything in this crate is deterministic given a seed: random draws come
//! from named splittable streams, reductions use fixed accumulation orders,
//! and transcendentals go through `libm`.

pub mod backbones;
pub mod data;
pub mod digest;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod param;
pub mod real;
pub mod rng;
pub mod scoring;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{FeaturePyramid, Tensor};
