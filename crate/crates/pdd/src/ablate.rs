//! The `ablate` command: run named config variants over several seeds and
//! report mean ranking metrics per variant.
//!
//! Variant grammar: `<base>(+<modifier>)*` where base is one of
//! `rd_1t1s | ina_mmu_2t1s | ina_mmu_2t1s_mpa | full_2t2s` and modifiers are
//! `nodiv` (lambda_div = 0), `score=fused|raw|ss`, `tau=<low>,<high>`.
//! Every variant is a pure transform of the base config. Within one
//! invocation, variants that share a training configuration (e.g. scoring-
//! only changes) share trained models.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use pdd_core::data::{gen_abnormal, gen_normal, normalize, TEST_NORMAL_OFFSET};
use pdd_core::model::{anomaly_maps, ModelBundle, Trainer};
use pdd_core::real::Real;
use pdd_core::scoring;
use pdd_core::tensor::Tensor;

use crate::config::{ConfigFile, Precision};
use crate::error::{AppError, Result};
use crate::evalrun::ReportMetrics;
use crate::train::trainer_config;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<String>,
}

impl AblationPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Io(format!("cannot read plan {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::Config(format!("invalid plan: {e}")))
    }
}

/// Apply a variant name to the base config.
pub fn apply_variant(base: &ConfigFile, name: &str) -> Result<ConfigFile> {
    let mut parts = name.split('+');
    let paradigm = parts.next().unwrap_or_default();
    let mut cfg = base.clone();
    cfg.model.paradigm = match paradigm {
        "rd_1t1s" | "ina_mmu_2t1s" | "ina_mmu_2t1s_mpa" | "full_2t2s" => paradigm.to_string(),
        other => {
            return Err(AppError::Config(format!(
                "unknown ablation variant base `{other}` in `{name}`"
            )));
        }
    };
    for modifier in parts {
        if modifier == "nodiv" {
            cfg.loss.lambda_div = 0.0;
        } else if let Some(v) = modifier.strip_prefix("score=") {
            cfg.scoring.score_pairs = match v {
                "fused" => "fused".into(),
                "raw" => "raw".into(),
                "ss" => "student_student".into(),
                other => {
                    return Err(AppError::Config(format!(
                        "unknown score mode `{other}` in variant `{name}`"
                    )));
                }
            };
        } else if let Some(v) = modifier.strip_prefix("tau=") {
            let nums: Vec<&str> = v.split(',').collect();
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| AppError::Config(format!("bad tau value `{s}` in `{name}`")))
            };
            if nums.len() != 2 {
                return Err(AppError::Config(format!(
                    "tau modifier needs `tau=<low>,<high>` in `{name}`"
                )));
            }
            cfg.div.tau_low = parse(nums[0])?;
            cfg.div.tau_high = parse(nums[1])?;
        } else {
            return Err(AppError::Config(format!(
                "unknown ablation modifier `{modifier}` in `{name}`"
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training cache key: the config with scoring options neutralized, so
/// scoring-only variants reuse the same trained model.
fn train_key(cfg: &ConfigFile) -> u64 {
    let mut c = cfg.clone();
    c.scoring = Default::default();
    c.digest()
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    pub per_seed: Vec<(u64, ReportMetrics)>,
    pub mean: ReportMetrics,
}

struct TestSet<P: Real> {
    images: Vec<Tensor<P>>,
    labels: Vec<u8>,
}

fn build_train_images<P: Real>(cfg: &ConfigFile) -> Result<Vec<Tensor<P>>> {
    let spec = cfg.synthetic_spec();
    let (h, w) = (cfg.encoder.input_size[0], cfg.encoder.input_size[1]);
    (0..spec.n_train_normal as u64)
        .map(|i| {
            let s = gen_normal(&spec, i);
            normalize::<P>(&s.image_tensor(), h, w).map_err(AppError::from)
        })
        .collect()
}

fn build_test_set<P: Real>(cfg: &ConfigFile) -> Result<TestSet<P>> {
    let spec = cfg.synthetic_spec();
    let (h, w) = (cfg.encoder.input_size[0], cfg.encoder.input_size[1]);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..spec.n_test_normal as u64 {
        let s = gen_normal(&spec, TEST_NORMAL_OFFSET + i);
        images.push(normalize::<P>(&s.image_tensor(), h, w).map_err(AppError::from)?);
        labels.push(0);
    }
    for i in 0..spec.n_test_abnormal as u64 {
        let s = gen_abnormal(&spec, i);
        images.push(normalize::<P>(&s.image_tensor(), h, w).map_err(AppError::from)?);
        labels.push(1);
    }
    Ok(TestSet { images, labels })
}

fn train_one<P: Real>(cfg: &ConfigFile, images: &[Tensor<P>]) -> Result<ModelBundle<P>> {
    let mut trainer = Trainer::new(trainer_config(cfg)?, images).map_err(AppError::from)?;
    for _ in 0..cfg.train.epochs {
        trainer.run_epoch().map_err(AppError::from)?;
    }
    Ok(trainer.bundle)
}

fn eval_bundle<P: Real>(
    cfg: &ConfigFile,
    bundle: &ModelBundle<P>,
    test: &TestSet<P>,
) -> Result<ReportMetrics> {
    let (h, w) = bundle.config.encoder.input_size;
    let mut scores = Vec::with_capacity(test.images.len());
    for chunk in test.images.chunks(16) {
        let refs: Vec<&Tensor<P>> = chunk.iter().collect();
        let batch = Tensor::concat0(&refs).map_err(AppError::from)?;
        let maps = anomaly_maps(
            bundle,
            &batch,
            cfg.score_pairs()?,
            cfg.scoring.smoothing_sigma,
        )
        .map_err(AppError::from)?;
        for i in 0..chunk.len() {
            let plane = &maps.data()[i * h * w..(i + 1) * h * w];
            scores.push(scoring::image_score(plane, cfg.score_reduction()?));
        }
    }
    Ok(ReportMetrics {
        auroc: scoring::auroc(&scores, &test.labels).map_err(AppError::from)?,
        ap: scoring::average_precision(&scores, &test.labels).map_err(AppError::from)?,
        f1_max: scoring::f1_max(&scores, &test.labels).map_err(AppError::from)?,
    })
}

/// Run the plan: `seeds` runs per variant (train.seed = base, base+1, ...),
/// trained with up to `jobs` worker threads, results order-stable.
pub fn run<P: Real>(
    base: &ConfigFile,
    plan: &AblationPlan,
    seeds: u64,
    jobs: usize,
) -> Result<Vec<VariantResult>> {
    if plan.variants.is_empty() {
        return Err(AppError::Config("ablation plan has no variants".into()));
    }
    if seeds == 0 {
        return Err(AppError::Config("--seeds must be >= 1".into()));
    }
    let variants: Vec<(String, ConfigFile)> = plan
        .variants
        .iter()
        .map(|name| apply_variant(base, name).map(|cfg| (name.clone(), cfg)))
        .collect::<Result<_>>()?;

    // Unique training jobs across variants and seeds.
    let mut job_index: Vec<(u64, ConfigFile)> = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for (_, cfg) in &variants {
        for s in 0..seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = base.train.seed + s;
            let key = train_key(&run_cfg) ^ run_cfg.train.seed.rotate_left(32);
            if !seen.contains_key(&key) {
                seen.insert(key, job_index.len());
                job_index.push((key, run_cfg));
            }
        }
    }

    let train_images = Arc::new(build_train_images::<P>(base)?);
    let test_set = build_test_set::<P>(base)?;

    // Work queue over unique jobs.
    let queue: Mutex<Vec<usize>> = Mutex::new((0..job_index.len()).rev().collect());
    let results: Mutex<HashMap<u64, std::result::Result<ModelBundle<P>, String>>> =
        Mutex::new(HashMap::new());
    let workers = jobs.max(1).min(job_index.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop();
                let Some(idx) = next else { break };
                let (key, cfg) = &job_index[idx];
                let outcome =
                    train_one::<P>(cfg, &train_images).map_err(|e| e.to_string());
                results.lock().expect("results lock").insert(*key, outcome);
            });
        }
    });
    let trained = results.into_inner().expect("results lock");

    let mut out = Vec::with_capacity(variants.len());
    for (name, cfg) in &variants {
        let mut per_seed = Vec::with_capacity(seeds as usize);
        for s in 0..seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = base.train.seed + s;
            let key = train_key(&run_cfg) ^ run_cfg.train.seed.rotate_left(32);
            let bundle = match trained.get(&key) {
                Some(Ok(b)) => b,
                Some(Err(e)) => {
                    return Err(AppError::Config(format!("variant `{name}` seed {s}: {e}")));
                }
                None => unreachable!("job scheduled for every (variant, seed)"),
            };
            let metrics = eval_bundle(&run_cfg, bundle, &test_set)?;
            per_seed.push((run_cfg.train.seed, metrics));
        }
        let k = per_seed.len() as f64;
        let mean = ReportMetrics {
            auroc: per_seed.iter().map(|(_, m)| m.auroc).sum::<f64>() / k,
            ap: per_seed.iter().map(|(_, m)| m.ap).sum::<f64>() / k,
            f1_max: per_seed.iter().map(|(_, m)| m.f1_max).sum::<f64>() / k,
        };
        out.push(VariantResult {
            name: name.clone(),
            per_seed,
            mean,
        });
    }
    Ok(out)
}

pub fn run_dispatch(
    base: &ConfigFile,
    plan: &AblationPlan,
    seeds: u64,
    jobs: usize,
) -> Result<Vec<VariantResult>> {
    match base.precision()? {
        Precision::F32 => run::<f32>(base, plan, seeds, jobs),
        Precision::F64 => run::<f64>(base, plan, seeds, jobs),
    }
}

/// Write `ablation.csv` (one mean row per variant), `ablation_runs.csv`
/// (one row per run) and `ablation_meta.json`.
pub fn write_outputs(
    out_dir: &Path,
    base: &ConfigFile,
    results: &[VariantResult],
    seeds: u64,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Io(format!("creating {}: {e}", out_dir.display())))?;
    let mut summary = String::from("variant,auroc,ap,f1_max,seed\n");
    for r in results {
        summary.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.name, r.mean.auroc, r.mean.ap, r.mean.f1_max, seeds
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), summary)
        .map_err(|e| AppError::Io(format!("writing ablation.csv: {e}")))?;

    let mut runs = String::from("variant,seed,auroc,ap,f1_max\n");
    for r in results {
        for (seed, m) in &r.per_seed {
            runs.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.name, seed, m.auroc, m.ap, m.f1_max
            ));
        }
    }
    std::fs::write(out_dir.join("ablation_runs.csv"), runs)
        .map_err(|e| AppError::Io(format!("writing ablation_runs.csv: {e}")))?;

    let meta = serde_json::json!({
        "config_digest": base.digest(),
        "seeds": seeds,
        "variants": results.iter().map(|r| r.name.clone()).collect::<Vec<_>>(),
    });
    std::fs::write(
        out_dir.join("ablation_meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| AppError::Io(format!("writing ablation_meta.json: {e}")))?;
    Ok(())
}
