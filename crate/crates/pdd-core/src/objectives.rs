//! Training objectives: distillation, prior-guided reconstruction with an
//! angular term, the dual-student diversity hinge, and their weighted total.
//!
//! Cosines inside losses are "flat": each sample's stage features are
//! flattened to one vector, the cosine is taken per sample, and the batch
//! mean is used. Per-pixel cosines are reserved for anomaly maps.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tape::{CosineAxis, Tape};
use crate::tensor::{FeaturePyramid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_kr: f64,
    pub lambda_prp: f64,
    pub lambda_div: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kr: 0.02,
            lambda_prp: 0.02,
            lambda_div: 0.5,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kr", self.lambda_kr),
            ("lambda_prp", self.lambda_prp),
            ("lambda_div", self.lambda_div),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a non-negative real, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivThresholds {
    pub tau_low: f64,
    pub tau_high: f64,
    /// Number of shallow stages treated as "low-dimensional".
    pub l_low: usize,
}

impl Default for DivThresholds {
    fn default() -> Self {
        DivThresholds {
            tau_low: 0.30,
            tau_high: 0.75,
            l_low: 2,
        }
    }
}

impl DivThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_low", self.tau_low), ("tau_high", self.tau_high)] {
            if !((-1.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "{name} must lie in [-1, 1], got {v}"
                )));
            }
        }
        if self.l_low > 4 {
            return Err(Error::Config(format!(
                "l_low must lie in [0, 4], got {}",
                self.l_low
            )));
        }
        Ok(())
    }
}

fn check_pyramids<P: Real>(
    op: &'static str,
    a: &FeaturePyramid<P>,
    b: &FeaturePyramid<P>,
) -> Result<()> {
    if !a.shapes_match(b) {
        return Err(Error::shape(op, "pyramids differ in stage shapes"));
    }
    Ok(())
}

/// Batch-mean flat cosine for one stage: scalar tensor.
fn cos_flat<P: Real>(tape: &mut Tape<P>, a: &Tensor<P>, b: &Tensor<P>) -> Result<Tensor<P>> {
    let per_sample = ops::cosine(tape, a, b, CosineAxis::Flat)?;
    ops::mean_all(tape, &per_sample)
}

/// Stage-summed MSE distillation loss.
pub fn loss_kr<P: Real>(
    tape: &mut Tape<P>,
    targets: &FeaturePyramid<P>,
    student: &FeaturePyramid<P>,
) -> Result<Tensor<P>> {
    check_pyramids("loss_kr", targets, student)?;
    let mut total: Option<Tensor<P>> = None;
    for i in 1..=4 {
        let term = ops::mse(tape, targets.stage(i), student.stage(i))?;
        total = Some(match total {
            None => term,
            Some(t) => ops::add(tape, &t, &term)?,
        });
    }
    Ok(total.expect("four stages"))
}

/// Stage-summed alpha·MSE + beta·(1 − cos) reconstruction loss.
pub fn loss_prp<P: Real>(
    tape: &mut Tape<P>,
    targets: &FeaturePyramid<P>,
    student: &FeaturePyramid<P>,
    w: &LossWeights,
) -> Result<Tensor<P>> {
    check_pyramids("loss_prp", targets, student)?;
    let mut total: Option<Tensor<P>> = None;
    for i in 1..=4 {
        let m = ops::mse(tape, targets.stage(i), student.stage(i))?;
        let m = ops::affine(tape, &m, w.alpha, 0.0)?;
        let c = cos_flat(tape, targets.stage(i), student.stage(i))?;
        // beta * (1 - cos)
        let c = ops::affine(tape, &c, -w.beta, w.beta)?;
        let term = ops::add(tape, &m, &c)?;
        total = Some(match total {
            None => term,
            Some(t) => ops::add(tape, &t, &term)?,
        });
    }
    Ok(total.expect("four stages"))
}

/// Diversity hinge between the two students: shallow stages are pushed
/// apart (penalize cosine above tau_low), deep stages pulled together
/// (penalize cosine below tau_high). Subgradient at the hinge boundary is 0.
pub fn loss_div<P: Real>(
    tape: &mut Tape<P>,
    student_u: &FeaturePyramid<P>,
    student_p: &FeaturePyramid<P>,
    thr: &DivThresholds,
) -> Result<Tensor<P>> {
    check_pyramids("loss_div", student_u, student_p)?;
    thr.validate()?;
    let mut total: Option<Tensor<P>> = None;
    for i in 1..=4 {
        let c = cos_flat(tape, student_u.stage(i), student_p.stage(i))?;
        let term = if i <= thr.l_low {
            // max(0, cos - tau_low)
            let shifted = ops::affine(tape, &c, 1.0, -thr.tau_low)?;
            ops::relu(tape, &shifted)?
        } else {
            // -min(0, cos - tau_high) = max(0, tau_high - cos)
            let shifted = ops::affine(tape, &c, -1.0, thr.tau_high)?;
            ops::relu(tape, &shifted)?
        };
        total = Some(match total {
            None => term,
            Some(t) => ops::add(tape, &t, &term)?,
        });
    }
    Ok(total.expect("four stages"))
}

/// Fixed-weight combination of the three losses.
pub fn loss_total<P: Real>(
    tape: &mut Tape<P>,
    kr: &Tensor<P>,
    prp: &Tensor<P>,
    div: &Tensor<P>,
    w: &LossWeights,
) -> Result<Tensor<P>> {
    w.validate()?;
    let a = ops::affine(tape, kr, w.lambda_kr, 0.0)?;
    let b = ops::affine(tape, prp, w.lambda_prp, 0.0)?;
    let c = ops::affine(tape, div, w.lambda_div, 0.0)?;
    let ab = ops::add(tape, &a, &b)?;
    ops::add(tape, &ab, &c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn pyramid(seed: u64, batch: usize) -> FeaturePyramid<f64> {
        let mut s = Stream::from_seed(seed);
        let shapes = [
            vec![batch, 2, 8, 8],
            vec![batch, 3, 4, 4],
            vec![batch, 4, 2, 2],
            vec![batch, 5, 1, 1],
        ];
        let stages: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|sh| {
                let n: usize = sh.iter().product();
                Tensor::from_vec(sh.clone(), (0..n).map(|_| s.uniform(-1.0, 1.0)).collect())
                    .unwrap()
            })
            .collect();
        FeaturePyramid::new(stages.try_into().unwrap())
    }

    fn negated(p: &FeaturePyramid<f64>) -> FeaturePyramid<f64> {
        p.map(|_, t| {
            Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|v| -v).collect())
        })
        .unwrap()
    }

    #[test]
    fn kr_zero_on_identical_pyramids() {
        let p = pyramid(1, 2);
        let mut tape = Tape::new();
        assert_eq!(loss_kr(&mut tape, &p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn kr_constant_offset_contributes_squared() {
        // One stage differing by a constant 2 adds exactly 4 (mean of 2^2).
        let p = pyramid(2, 1);
        let shifted = p
            .map(|i, t| {
                let delta = if i == 3 { 2.0 } else { 0.0 };
                Tensor::from_vec(
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v + delta).collect(),
                )
            })
            .unwrap();
        let mut tape = Tape::new();
        let l = loss_kr(&mut tape, &p, &shifted).unwrap().item();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kr_matches_stagewise_oracle() {
        let a = pyramid(3, 2);
        let b = pyramid(4, 2);
        let mut tape = Tape::new();
        let got = loss_kr(&mut tape, &a, &b).unwrap().item();
        let mut want = 0.0;
        for i in 1..=4 {
            let (x, y) = (a.stage(i), b.stage(i));
            let mut s = 0.0;
            for k in 0..x.numel() {
                let d = x.data()[k] - y.data()[k];
                s += d * d;
            }
            want += s / x.numel() as f64;
        }
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn prp_zero_on_identical_and_reduces_to_kr_when_beta_zero() {
        let p = pyramid(5, 2);
        let q = pyramid(6, 2);
        let mut tape = Tape::new();
        let w = LossWeights::default();
        // The epsilon guard leaves 1 - cos(v,v) = eps/(|v|^2 + eps) per stage.
        let l = loss_prp(&mut tape, &p, &p, &w).unwrap().item();
        assert!(l.abs() < 1e-6, "cos(v,v)=1 should zero the loss, got {l}");

        let w0 = LossWeights {
            beta: 0.0,
            alpha: 1.0,
            ..Default::default()
        };
        let prp = loss_prp(&mut tape, &p, &q, &w0).unwrap().item();
        let kr = loss_kr(&mut tape, &p, &q).unwrap().item();
        assert!((prp - kr).abs() < 1e-12);
    }

    #[test]
    fn prp_antipodal_cosine_adds_two_beta_per_stage() {
        let p = pyramid(7, 2);
        let n = negated(&p);
        let w = LossWeights {
            alpha: 0.0,
            beta: 1.5,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let l = loss_prp(&mut tape, &p, &n, &w).unwrap().item();
        // cos = -1 per stage: 4 stages * beta * (1 - (-1)) = 8 * beta_half...
        let want = 4.0 * w.beta * 2.0;
        assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn div_hand_values_identical_and_orthogonal() {
        let thr = DivThresholds::default();
        let p = pyramid(8, 2);
        let mut tape = Tape::new();
        // Identical students: cos = 1 everywhere -> 2 * (1 - 0.30) = 1.40.
        let l = loss_div(&mut tape, &p, &p, &thr).unwrap().item();
        assert!((l - 1.40).abs() < 1e-9, "identical students: {l}");

        // Orthogonal students: cos = 0 -> high stages contribute 0.75 each.
        let orth = orthogonal_pair();
        let l = loss_div(&mut tape, &orth.0, &orth.1, &thr).unwrap().item();
        assert!((l - 1.50).abs() < 1e-9, "orthogonal students: {l}");
    }

    /// Build pyramids whose per-sample flattened stage vectors are exactly
    /// orthogonal: one lives on even indices, the other on odd.
    fn orthogonal_pair() -> (FeaturePyramid<f64>, FeaturePyramid<f64>) {
        let shapes = [
            vec![2usize, 2, 8, 8],
            vec![2, 3, 4, 4],
            vec![2, 4, 2, 2],
            vec![2, 4, 1, 1],
        ];
        let build = |even: bool| {
            let stages: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|sh| {
                    let n: usize = sh.iter().product();
                    let data: Vec<f64> = (0..n)
                        .map(|i| if (i % 2 == 0) == even { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::from_vec(sh.clone(), data).unwrap()
                })
                .collect();
            FeaturePyramid::new(stages.try_into().unwrap())
        };
        (build(true), build(false))
    }

    #[test]
    fn div_hinge_boundary_contributes_zero() {
        // cos exactly tau_low at a low stage -> that stage contributes 0.
        // Construct cos = 0.30 via vectors (1, 0) and (0.3, sqrt(1-0.09)).
        let thr = DivThresholds::default();
        let y = (1.0f64 - 0.09).sqrt();
        let mk = |v: [f64; 2]| {
            let stages = [
                Tensor::from_vec(vec![1, 2, 1, 1], v.to_vec()).unwrap(),
                Tensor::from_vec(vec![1, 2, 1, 1], v.to_vec()).unwrap(),
                Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap(),
                Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap(),
            ];
            FeaturePyramid::new(stages)
        };
        let a = mk([1.0, 0.0]);
        let b_stages = [
            Tensor::from_vec(vec![1, 2, 1, 1], vec![0.30, y]).unwrap(),
            Tensor::from_vec(vec![1, 2, 1, 1], vec![0.30, y]).unwrap(),
            Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap(),
        ];
        let b = FeaturePyramid::new(b_stages);
        let mut tape = Tape::new();
        let l = loss_div(&mut tape, &a, &b, &thr).unwrap().item();
        // Low stages sit exactly on the boundary (0 each); deep stages have
        // cos = 1 >= tau_high (0 each).
        assert!(l.abs() < 1e-7, "boundary hinge should vanish, got {l}");
    }

    #[test]
    fn div_monotonicity_in_cosine() {
        // Increasing cos at a low stage never decreases the loss; increasing
        // cos at a high stage never increases it.
        let thr = DivThresholds::default();
        let mk = |low_cos: f64, high_cos: f64| {
            let unit = |c: f64| {
                let y = (1.0 - c * c).max(0.0).sqrt();
                Tensor::from_vec(vec![1, 2, 1, 1], vec![c, y]).unwrap()
            };
            let a = FeaturePyramid::new([
                Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap(),
                Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap(),
                Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap(),
                Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap(),
            ]);
            let b = FeaturePyramid::new([unit(low_cos), unit(low_cos), unit(high_cos), unit(high_cos)]);
            (a, b)
        };
        let mut tape = Tape::new();
        let mut prev = None;
        for step in 0..=10 {
            let c = -1.0 + 0.2 * step as f64;
            let (a, b) = mk(c, 0.5);
            let l = loss_div(&mut tape, &a, &b, &thr).unwrap().item();
            if let Some(p) = prev {
                assert!(l >= p - 1e-9, "low-stage monotonicity violated");
            }
            prev = Some(l);
        }
        prev = None;
        for step in 0..=10 {
            let c = -1.0 + 0.2 * step as f64;
            let (a, b) = mk(0.0, c);
            let l = loss_div(&mut tape, &a, &b, &thr).unwrap().item();
            if let Some(p) = prev {
                assert!(l <= p + 1e-9, "high-stage monotonicity violated");
            }
            prev = Some(l);
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = Tape::new();
        let kr = Tensor::scalar(1.0);
        let prp = Tensor::scalar(1.0);
        let div = Tensor::scalar(1.0);
        let w = LossWeights::default();
        let total = loss_total(&mut tape, &kr, &prp, &div, &w).unwrap().item();
        assert!((total - 0.54).abs() < 1e-12);

        let zero = LossWeights {
            lambda_kr: 0.0,
            lambda_prp: 0.0,
            lambda_div: 0.0,
            ..Default::default()
        };
        let total = loss_total(&mut tape, &kr, &prp, &div, &zero).unwrap().item();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let w = LossWeights {
            lambda_div: -0.1,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let mut tape = Tape::new();
        let s = Tensor::scalar(1.0);
        assert!(loss_total(&mut tape, &s, &s, &s, &w).is_err());
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut tape = Tape::new();
        for seed in 0..20 {
            let a = pyramid(100 + seed, 2);
            let b = pyramid(200 + seed, 2);
            assert!(loss_kr(&mut tape, &a, &b).unwrap().item() >= 0.0);
            assert!(
                loss_prp(&mut tape, &a, &b, &LossWeights::default())
                    .unwrap()
                    .item()
                    >= 0.0
            );
            let d = loss_div(&mut tape, &a, &b, &DivThresholds::default())
                .unwrap()
                .item();
            assert!(d >= 0.0);
            // Bounds: each low-stage term <= 1 - tau_low, each high <= 1 + tau_high.
            let bound = 2.0 * (1.0 - 0.30) + 2.0 * (1.0 + 0.75) + 1e-9;
            assert!(d <= bound);
        }
    }
}
