//! Anomaly maps and image-level evaluation metrics.
//!
//! A map aggregates, over stages and (target, student) pairs, the per-pixel
//! channel-axis value of 1 − cosine, each stage bilinearly resized to the
//! input resolution, followed by Gaussian smoothing. Image scores reduce the
//! smoothed map; AUROC / AP / F1-max rank the scores.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tape::{CosineAxis, Tape};
use crate::tensor::{FeaturePyramid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreReduction {
    Max,
    Mean,
}

/// Per-pixel anomaly intensities at input resolution for a batch:
/// sum over pairs and stages of resized (1 − cos_channel).
pub fn aggregate_map<P: Real>(
    pairs: &[(&FeaturePyramid<P>, &FeaturePyramid<P>)],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<P>> {
    const OP: &str = "anomaly_map";
    let first = pairs
        .first()
        .ok_or_else(|| Error::arg(OP, "need at least one (target, student) pair"))?;
    let n = first.0.stage(1).shape()[0];
    let mut scratch = Tape::new();
    let mut total: Option<Tensor<P>> = None;
    for (target, student) in pairs {
        if !target.shapes_match(student) {
            return Err(Error::shape(OP, "target/student pyramids differ in shape"));
        }
        for i in 1..=4 {
            let cos = ops::cosine(
                &mut scratch,
                &target.stage(i).detached(),
                &student.stage(i).detached(),
                CosineAxis::Channel,
            )?;
            let d = ops::affine(&mut scratch, &cos, -1.0, 1.0)?;
            let d = ops::bilinear_resize(&mut scratch, &d, out_h, out_w)?;
            total = Some(match total {
                None => d,
                Some(t) => ops::add(&mut scratch, &t, &d)?,
            });
        }
    }
    let map = total.expect("at least one stage");
    debug_assert_eq!(map.shape(), &[n, 1, out_h, out_w]);
    Ok(map)
}

/// Separable Gaussian blur truncated at 4 sigma with a renormalized kernel;
/// near borders the kernel renormalizes over in-bounds taps, so constant
/// maps stay constant. `sigma <= 0` is the identity.
pub fn gaussian_smooth<P: Real>(map: &Tensor<P>, sigma: f64) -> Result<Tensor<P>> {
    let (n, c, h, w) = map.dims4("gaussian_smooth")?;
    if sigma <= 0.0 {
        return Ok(map.detached());
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.into_iter().map(|v| v / wsum).collect();

    let blur_axis = |src: &[P], len: usize, stride: usize, count: usize, dst: &mut [P]| {
        for lane in 0..count {
            // Lanes are rows (stride 1) or columns (stride w).
            let lane_base = if stride == 1 { lane * len } else { lane };
            for i in 0..len {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (k, &wv) in weights.iter().enumerate() {
                    let j = i as isize + (k as isize - radius);
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    acc += wv * src[lane_base + j as usize * stride].to_f64();
                    norm += wv;
                }
                dst[lane_base + i * stride] = P::from_f64(acc / norm);
            }
        }
    };

    let mut out = map.data().to_vec();
    let mut tmp = vec![P::ZERO; h * w];
    let mut result = vec![P::ZERO; map.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        // Horizontal, then vertical.
        blur_axis(&out[base..base + h * w], w, 1, h, &mut tmp);
        let mut vert = vec![P::ZERO; h * w];
        blur_axis(&tmp, h, w, w, &mut vert);
        result[base..base + h * w].copy_from_slice(&vert);
    }
    out = result;
    Tensor::from_vec(vec![n, c, h, w], out)
}

/// Reduce one sample's smoothed map to an image-level score.
pub fn image_score<P: Real>(map_sample: &[P], reduction: ScoreReduction) -> f64 {
    match reduction {
        ScoreReduction::Max => map_sample
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64())),
        ScoreReduction::Mean => {
            map_sample.iter().map(|v| v.to_f64()).sum::<f64>() / map_sample.len() as f64
        }
    }
}

fn check_classes(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::arg("metrics", "scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    Ok((n_pos, n_neg))
}

/// Exact Mann-Whitney AUROC with 0.5 credit for ties, computed via midranks.
/// Undefined when a class is absent or when every score is identical (no
/// ranking information); both cases return `UndefinedMetric`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check_classes(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    if scores.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::UndefinedMetric(
            "AUROC is undefined for all-identical scores".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks over tie groups.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision via threshold-grouped step summation (ties grouped,
/// no interpolation).
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, _) = check_classes(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Maximum F1 over thresholds drawn from the unique scores (predict
/// abnormal iff score >= threshold); zero-denominator F1 counts as 0.
pub fn f1_max(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, _) = check_classes(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "F1 needs at least one positive".into(),
        ));
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    let mut best = 0.0f64;
    for &th in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fnn = 0usize;
        for (s, l) in scores.iter().zip(labels.iter()) {
            let pred = *s >= th;
            match (pred, *l) {
                (true, 1) => tp += 1,
                (true, 0) => fp += 1,
                (false, 1) => fnn += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fnn;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        best = best.max(f1);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn auroc_spec_examples() {
        // Perfectly separated / inverted.
        assert_eq!(
            auroc(&[0.1, 0.2, 0.9, 0.8], &[0, 0, 1, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[0.9, 0.8, 0.1, 0.2], &[0, 0, 1, 1]).unwrap(),
            0.0
        );
        // Pair enumeration: (2>1)+(2<3)+(4>1)+(4>3) = 3 of 4.
        let v = auroc(&[1.0, 2.0, 3.0, 4.0], &[0, 1, 0, 1]).unwrap();
        assert_eq!(v, 0.75);
    }

    #[test]
    fn auroc_undefined_cases() {
        assert!(matches!(
            auroc(&[1.0, 2.0], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auroc(&[0.5, 0.5, 0.5], &[0, 1, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_tie_credit() {
        // One tie across classes contributes 0.5 of one pair.
        let v = auroc(&[1.0, 2.0, 2.0], &[0, 0, 1]).unwrap();
        assert_eq!(v, 0.75); // pairs: (2>1)=1, (2==2)=0.5 -> 1.5/2
    }

    #[test]
    fn ap_spec_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        // One positive ranked last among 4 -> 1/4.
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap(),
            0.25
        );
        let v = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn f1_spec_examples() {
        assert_eq!(f1_max(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        // All positive-labeled: lowest threshold predicts everything abnormal.
        assert_eq!(f1_max(&[0.3, 0.1, 0.9], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(f1_max(&[3.0, 2.0, 1.0], &[1, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn f1_beats_predict_all_baseline() {
        let mut s = Stream::from_seed(5);
        for _ in 0..100 {
            let n = 2 + (s.below(30) as usize);
            let scores: Vec<f64> = (0..n).map(|_| s.uniform(0.0, 1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| (s.next_u64() & 1) as u8).collect();
            if !labels.contains(&1) {
                continue;
            }
            let n_pos = labels.iter().filter(|&&l| l == 1).count();
            let baseline = 2.0 * n_pos as f64 / (n + n_pos) as f64;
            let best = f1_max(&scores, &labels).unwrap();
            assert!(best >= baseline - 1e-12);
        }
    }

    #[test]
    fn auroc_invariances() {
        let mut s = Stream::from_seed(6);
        for _ in 0..50 {
            let n = 4 + (s.below(20) as usize);
            let mut scores: Vec<f64> = (0..n).map(|_| s.uniform(-2.0, 2.0)).collect();
            scores.dedup();
            let labels: Vec<u8> = (0..scores.len())
                .map(|i| if i % 2 == 0 { 0 } else { 1 })
                .collect();
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            let base = auroc(&scores, &labels).unwrap();
            // Strictly increasing transform.
            let squashed: Vec<f64> = scores.iter().map(|&v| (0.7 * v).tanh() * 3.0 + 1.0).collect();
            let same = auroc(&squashed, &labels).unwrap();
            assert!((base - same).abs() < 1e-12);
            // Negation flips.
            let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
            let flipped = auroc(&neg, &labels).unwrap();
            assert!((base + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn map_zero_when_students_equal_targets() {
        let mut s = Stream::from_seed(9);
        let stages: Vec<Tensor<f64>> = [(2usize, 4usize), (3, 2), (4, 1), (5, 1)]
            .iter()
            .map(|&(c, hw)| {
                let n = 2 * c * hw * hw;
                Tensor::from_vec(
                    vec![2, c, hw, hw],
                    (0..n).map(|_| s.uniform(0.5, 1.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let p = FeaturePyramid::new(stages.try_into().unwrap());
        let map = aggregate_map(&[(&p, &p), (&p, &p)], 16, 16).unwrap();
        assert!(map.data().iter().all(|&v| v.abs() < 1e-6));
        let smoothed = gaussian_smooth(&map, 4.0).unwrap();
        assert!(smoothed.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn map_antipodal_student_gives_constant_two_per_stage() {
        let mut s = Stream::from_seed(10);
        let stages: Vec<Tensor<f64>> = [(2usize, 4usize), (3, 2), (4, 2), (5, 1)]
            .iter()
            .map(|&(c, hw)| {
                let n = c * hw * hw;
                Tensor::from_vec(
                    vec![1, c, hw, hw],
                    (0..n).map(|_| s.uniform(0.5, 1.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let p = FeaturePyramid::new(stages.try_into().unwrap());
        let anti = p
            .map(|_, t| {
                Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|v| -v).collect())
            })
            .unwrap();
        let map = aggregate_map(&[(&p, &anti), (&p, &p)], 8, 8).unwrap();
        // Antipodal pair: 1 - (-1) = 2 per stage; equal pair: 0. Four stages.
        for &v in map.data() {
            assert!((v - 8.0).abs() < 1e-5, "{v}");
        }
        // Smoothing preserves constants.
        let sm = gaussian_smooth(&map, 4.0).unwrap();
        for &v in sm.data() {
            assert!((v - 8.0).abs() < 1e-5);
        }
    }

    #[test]
    fn image_score_reductions() {
        assert_eq!(image_score(&[0.0f64, 0.0], ScoreReduction::Max), 0.0);
        assert_eq!(image_score(&[0.5f64, 0.5], ScoreReduction::Mean), 0.5);
        // Single spike, no smoothing.
        let mut m = vec![0.0f64; 25];
        m[12] = 3.0;
        assert_eq!(image_score(&m, ScoreReduction::Max), 3.0);
    }

    #[test]
    fn smoothing_spreads_spike_monotonically() {
        let mut m = vec![0.0f64; 33 * 33];
        m[16 * 33 + 16] = 1.0;
        let t = Tensor::from_vec(vec![1, 1, 33, 33], m).unwrap();
        let sm = gaussian_smooth(&t, 2.0).unwrap();
        let d = sm.data();
        assert!(d[16 * 33 + 16] > d[16 * 33 + 18]);
        assert!(d[16 * 33 + 18] > d[16 * 33 + 24]);
        // Mass is conserved away from borders for an interior spike.
        let total: f64 = d.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
