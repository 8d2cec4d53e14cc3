//! Seeded synthetic "normal anatomy / lesion" image generator.
//!
//! Normal images are sums of Gaussian blobs, min-max normalized, with light
//! pixel noise. Abnormal images reuse the exact same background machinery
//! and add one contrast disk. Everything is a pure function of
//! (seed, index), so datasets are reproducible across platforms.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::rng::Stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    /// Number of background Gaussian blobs, in [3, 6].
    pub blob_count: usize,
    pub lesion_radius: (f64, f64),
    /// Additive lesion contrast, in (0, 1].
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 64,
            width: 64,
            n_train_normal: 200,
            n_test_normal: 50,
            n_test_abnormal: 50,
            blob_count: 4,
            lesion_radius: (4.0, 8.0),
            lesion_contrast: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic.image size must be positive".into()));
        }
        if !(3..=6).contains(&self.blob_count) {
            return Err(Error::Config(format!(
                "synthetic.blob_count must lie in [3, 6], got {}",
                self.blob_count
            )));
        }
        let (r_min, r_max) = self.lesion_radius;
        if !(r_min > 0.0 && r_max >= r_min) {
            return Err(Error::Config(format!(
                "synthetic.lesion_radius must satisfy 0 < r_min <= r_max, got ({r_min}, {r_max})"
            )));
        }
        let margin = r_max.ceil() as usize + 1;
        if 2 * margin >= self.height.min(self.width) {
            return Err(Error::Config(format!(
                "synthetic.lesion_radius: lesion of radius {r_max} cannot fit inside {}x{}",
                self.height, self.width
            )));
        }
        if !(self.lesion_contrast > 0.0 && self.lesion_contrast <= 1.0) {
            return Err(Error::Config(format!(
                "synthetic.lesion_contrast must lie in (0, 1], got {}",
                self.lesion_contrast
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// Grayscale pixels in [0, 1], row-major [H, W].
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub label: u8,
    /// Lesion mask, present iff label == 1.
    pub mask: Option<Vec<u8>>,
}

impl Sample {
    pub fn image_tensor<P: Real>(&self) -> Tensor<P> {
        let data: Vec<P> = self.pixels.iter().map(|&v| P::from_f64(v as f64)).collect();
        Tensor::from_vec(vec![1, 1, self.height, self.width], data).expect("sample shape")
    }
}

/// Background index spaces are disjoint between normal and abnormal samples
/// but flow through the same generator, so the two classes share the
/// background distribution exactly.
const ABNORMAL_BG_OFFSET: u64 = 1 << 32;

/// Index offset separating test normals from train normals.
pub const TEST_NORMAL_OFFSET: u64 = 1_000_000;

fn gen_background(spec: &SyntheticSpec, bg_index: u64) -> Vec<f32> {
    let mut rng = Stream::derive(spec.seed, "background", bg_index);
    let (h, w) = (spec.height, spec.width);
    let min_side = h.min(w) as f64;
    let mut img = vec![0.0f64; h * w];
    for _ in 0..spec.blob_count {
        let cy = rng.uniform(0.0, h as f64);
        let cx = rng.uniform(0.0, w as f64);
        let sigma = rng.uniform(0.10, 0.30) * min_side;
        let amp = rng.uniform(0.5, 1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                img[y * w + x] += amp * libm::exp(-(dy * dy + dx * dx) * inv);
            }
        }
    }
    // Min-max normalize to [0, 1].
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in img.iter_mut() {
        *v = (*v - lo) / span;
    }
    // Light pixel noise, clamped back into range.
    img.iter()
        .map(|&v| (v + 0.02 * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Deterministic normal sample for `(spec.seed, index)`.
pub fn gen_normal(spec: &SyntheticSpec, index: u64) -> Sample {
    Sample {
        id: format!("normal_{index:05}"),
        pixels: gen_background(spec, index),
        height: spec.height,
        width: spec.width,
        label: 0,
        mask: None,
    }
}

/// Deterministic abnormal sample: background + one contrast disk.
pub fn gen_abnormal(spec: &SyntheticSpec, index: u64) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut pixels = gen_background(spec, ABNORMAL_BG_OFFSET + index);
    let mut rng = Stream::derive(spec.seed, "lesion", index);
    let (r_min, r_max) = spec.lesion_radius;
    let r = rng.uniform(r_min, r_max);
    let margin = r.ceil() + 1.0;
    let cy = rng.uniform(margin, h as f64 - margin);
    let cx = rng.uniform(margin, w as f64 - margin);
    let r2 = r * r;
    let mut mask = vec![0u8; h * w];
    let mut disk_sum = 0.0f64;
    let mut disk_count = 0usize;
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r2 {
                mask[y * w + x] = 1;
                disk_sum += pixels[y * w + x] as f64;
                disk_count += 1;
            }
        }
    }
    // Hypo-intense on bright tissue, hyper-intense on dark: the contrast
    // points toward the roomier side of [0, 1], which keeps the realized
    // |delta| close to the requested one despite clamping.
    let sign = if disk_sum / disk_count as f64 > 0.5 {
        -1.0
    } else {
        1.0
    };
    let delta = (sign * spec.lesion_contrast) as f32;
    for (i, m) in mask.iter().enumerate() {
        if *m == 1 {
            pixels[i] = (pixels[i] + delta).clamp(0.0, 1.0);
        }
    }
    Sample {
        id: format!("abnormal_{index:05}"),
        pixels,
        height: h,
        width: w,
        label: 1,
        mask: Some(mask),
    }
}

/// Resize a [0,1] image tensor to the model input size and map the range
/// affinely to [-1, 1]. No per-image statistics are involved, so constant
/// images stay constant.
pub fn normalize<P: Real>(
    image: &Tensor<P>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<P>> {
    let mut scratch = Tape::new();
    let resized = ops::bilinear_resize(&mut scratch, &image.detached(), target_h, target_w)?;
    ops::affine(&mut scratch, &resized, 2.0, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_guards() {
        assert!(SyntheticSpec::default().validate().is_ok());
        assert!(SyntheticSpec {
            lesion_contrast: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            blob_count: 7,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            lesion_radius: (4.0, 40.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = gen_normal(&spec, 3);
        let b = gen_normal(&spec, 3);
        assert_eq!(a.pixels, b.pixels);
        let c = gen_abnormal(&spec, 3);
        let d = gen_abnormal(&spec, 3);
        assert_eq!(c.pixels, d.pixels);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn pixel_range_holds_over_many_samples() {
        let spec = SyntheticSpec::default();
        let mut mean_sum = 0.0f64;
        let n = 1000;
        for i in 0..n {
            let s = gen_normal(&spec, i);
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            let mut acc = 0.0f64;
            for &p in &s.pixels {
                lo = lo.min(p);
                hi = hi.max(p);
                acc += p as f64;
            }
            assert!(lo >= 0.0 && hi <= 1.0);
            mean_sum += acc / s.pixels.len() as f64;
        }
        // Pinned from the generator: blob backgrounds average mid-range.
        let mean = mean_sum / n as f64;
        assert!((0.2..=0.8).contains(&mean), "mean pixel {mean}");
    }

    #[test]
    fn lesion_mask_geometry() {
        let spec = SyntheticSpec::default();
        let (r_min, r_max) = spec.lesion_radius;
        for i in 0..100 {
            let s = gen_abnormal(&spec, i);
            let mask = s.mask.as_ref().unwrap();
            let area: usize = mask.iter().map(|&m| m as usize).sum();
            let lo = core::f64::consts::PI * r_min * r_min * 0.8;
            let hi = core::f64::consts::PI * r_max * r_max * 1.2;
            assert!(
                (area as f64) >= lo && (area as f64) <= hi,
                "sample {i}: mask area {area} outside [{lo:.1}, {hi:.1}]"
            );
        }
    }

    #[test]
    fn lesion_contrast_close_to_delta() {
        // mean |image - background| over the mask across 100 samples ~ delta.
        let spec = SyntheticSpec::default();
        let mut ratio_sum = 0.0f64;
        let n = 100;
        for i in 0..n {
            let ab = gen_abnormal(&spec, i);
            let bg = gen_background(&spec, ABNORMAL_BG_OFFSET + i);
            let mask = ab.mask.as_ref().unwrap();
            let mut acc = 0.0f64;
            let mut cnt = 0usize;
            for k in 0..mask.len() {
                if mask[k] == 1 {
                    acc += (ab.pixels[k] - bg[k]).abs() as f64;
                    cnt += 1;
                }
            }
            ratio_sum += acc / cnt as f64;
        }
        let mean_delta = ratio_sum / n as f64;
        let target = spec.lesion_contrast;
        assert!(
            (mean_delta - target).abs() <= 0.2 * target,
            "mean lesion contrast {mean_delta} not within 20% of {target}"
        );
    }

    #[test]
    fn mean_pixel_scorer_is_uninformative_at_small_delta() {
        // Generator sanity: backgrounds are exchangeable between classes.
        let spec = SyntheticSpec {
            lesion_contrast: 0.02,
            ..Default::default()
        };
        let scores_labels: Vec<(f64, u8)> = (0..50)
            .map(|i| {
                let s = gen_normal(&spec, 10_000 + i);
                (
                    s.pixels.iter().map(|&p| p as f64).sum::<f64>() / s.pixels.len() as f64,
                    0u8,
                )
            })
            .chain((0..50).map(|i| {
                let s = gen_abnormal(&spec, i);
                (
                    s.pixels.iter().map(|&p| p as f64).sum::<f64>() / s.pixels.len() as f64,
                    1u8,
                )
            }))
            .collect();
        let scores: Vec<f64> = scores_labels.iter().map(|x| x.0).collect();
        let labels: Vec<u8> = scores_labels.iter().map(|x| x.1).collect();
        let auroc = crate::scoring::auroc(&scores, &labels).unwrap();
        assert!(
            (0.4..=0.6).contains(&auroc),
            "mean-pixel scorer should be uninformative, AUROC {auroc}"
        );
    }

    #[test]
    fn normalize_affine_contract() {
        let half = Tensor::<f64>::full(vec![1, 1, 8, 8], 0.5);
        let out = normalize(&half, 8, 8).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let one = Tensor::<f64>::full(vec![1, 1, 8, 8], 1.0);
        let out = normalize(&one, 16, 16).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        // Identity resize when already at target size.
        let mut s = Stream::from_seed(3);
        let data: Vec<f64> = (0..64).map(|_| s.uniform(0.0, 1.0)).collect();
        let img = Tensor::from_vec(vec![1, 1, 8, 8], data.clone()).unwrap();
        let out = normalize(&img, 8, 8).unwrap();
        for i in 0..64 {
            assert_eq!(out.data()[i], 2.0 * data[i] - 1.0);
        }
    }
}
