//! The `eval` command: anomaly maps and scores for a test manifest, the
//! JSON report, and per-sample PGM (optionally raw f32) map files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pdd_core::data::normalize;
use pdd_core::model::{anomaly_maps, ModelBundle, ScorePairs};
use pdd_core::real::Real;
use pdd_core::scoring::{self, ScoreReduction};
use pdd_core::tensor::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigFile, Precision};
use crate::dataset::{self, Dataset};
use crate::error::{AppError, Result};
use crate::pgm::{self, GrayImage};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportSample {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config_digest: u64,
    pub status: String,
    pub samples: Vec<ReportSample>,
    pub metrics: Option<ReportMetrics>,
    /// Global max of the smoothed maps; PGM pixels are value/map_scale*255.
    pub map_scale: f64,
}

/// Scores plus per-sample maps for a list of manifest entries.
pub fn score_entries<P: Real>(
    bundle: &ModelBundle<P>,
    entries: &[dataset::ManifestEntry],
    score_pairs: ScorePairs,
    sigma: f64,
    reduction: ScoreReduction,
) -> Result<(Vec<f64>, Vec<Vec<f32>>, (usize, usize))> {
    let (h, w) = bundle.config.encoder.input_size;
    let mut scores = Vec::with_capacity(entries.len());
    let mut maps = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(16) {
        let mut parts = Vec::with_capacity(chunk.len());
        for e in chunk {
            let (ih, iw, px) = dataset::load_pixels(e)?;
            let data: Vec<P> = px.iter().map(|&v| P::from_f64(v as f64)).collect();
            let t = Tensor::from_vec(vec![1, 1, ih, iw], data).map_err(AppError::from)?;
            parts.push(normalize(&t, h, w).map_err(AppError::from)?);
        }
        let refs: Vec<&Tensor<P>> = parts.iter().collect();
        let batch = Tensor::concat0(&refs).map_err(AppError::from)?;
        let batch_maps = anomaly_maps(bundle, &batch, score_pairs, sigma).map_err(AppError::from)?;
        for (i, _) in chunk.iter().enumerate() {
            let plane = &batch_maps.data()[i * h * w..(i + 1) * h * w];
            scores.push(scoring::image_score(plane, reduction));
            maps.push(plane.iter().map(|v| v.to_f64() as f32).collect());
        }
    }
    Ok((scores, maps, (h, w)))
}

fn flat_id(id: &str) -> String {
    id.replace('/', "_")
}

/// Full evaluation: maps + report under `out_dir`. Returns the report; an
/// undefined metric is surfaced in the report status AND as an error so the
/// CLI can exit 5 after writing everything.
pub fn run<P: Real>(
    config: &ConfigFile,
    ck: &Checkpoint,
    ds: &Dataset,
    out_dir: &Path,
) -> Result<EvalReport> {
    std::fs::create_dir_all(out_dir.join("maps"))
        .map_err(|e| AppError::Io(format!("creating {}: {e}", out_dir.display())))?;
    let mut bundle =
        ModelBundle::<P>::init(config.model_config()?).map_err(AppError::from)?;
    ck.restore_bundle(&mut bundle)?;

    let (scores, maps, (h, w)) = score_entries(
        &bundle,
        &ds.test,
        config.score_pairs()?,
        config.scoring.smoothing_sigma,
        config.score_reduction()?,
    )?;
    let labels: Vec<u8> = ds.test.iter().map(|e| e.label).collect();

    // Map files, linearly rescaled by the dataset-global max.
    let map_scale = maps
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |acc, &v| acc.max(v as f64));
    for (entry, map) in ds.test.iter().zip(maps.iter()) {
        let pixels: Vec<u8> = map
            .iter()
            .map(|&v| {
                if map_scale > 0.0 {
                    ((v as f64 / map_scale) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        let img = GrayImage {
            width: w,
            height: h,
            pixels,
        };
        pgm::write_pgm(&out_dir.join(format!("maps/{}.pgm", flat_id(&entry.id))), &img)?;
        if config.scoring.emit_raw_maps {
            pgm::write_raw_map(
                &out_dir.join(format!("maps/{}.bin", flat_id(&entry.id))),
                h,
                w,
                map,
            )?;
        }
    }

    let samples: Vec<ReportSample> = ds
        .test
        .iter()
        .zip(scores.iter())
        .map(|(e, &score)| ReportSample {
            id: e.id.clone(),
            label: e.label,
            score,
        })
        .collect();

    let metric_result = scoring::auroc(&scores, &labels).and_then(|auroc| {
        Ok(ReportMetrics {
            auroc,
            ap: scoring::average_precision(&scores, &labels)?,
            f1_max: scoring::f1_max(&scores, &labels)?,
        })
    });
    let (status, metrics, failure) = match metric_result {
        Ok(m) => ("ok".to_string(), Some(m), None),
        Err(e) => (format!("undefined_metric: {e}"), None, Some(e)),
    };
    let report = EvalReport {
        config_digest: config.digest(),
        status,
        samples,
        metrics,
        map_scale,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out_dir.join("report.json"), json)
        .map_err(|e| AppError::Io(format!("writing report: {e}")))?;
    match failure {
        Some(e) => Err(AppError::from(e)),
        None => Ok(report),
    }
}

pub fn run_dispatch(
    config: &ConfigFile,
    ck: &Checkpoint,
    ds: &Dataset,
    out_dir: &Path,
) -> Result<EvalReport> {
    match config.precision()? {
        Precision::F32 => run::<f32>(config, ck, ds, out_dir),
        Precision::F64 => run::<f64>(config, ck, ds, out_dir),
    }
}
