//! The `train` command: load data, run the epoch loop, write the TrainLog
//! CSV, the config echo and the final checkpoint.

use std::path::Path;

use pdd_core::data::normalize;
use pdd_core::model::{Trainer, TrainerConfig};
use pdd_core::real::Real;
use pdd_core::tensor::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigFile, Precision};
use crate::dataset::{self, Dataset};
use crate::error::{AppError, Result};

pub const LOG_HEADER: &str = "epoch,lr,l_kr,l_prp,l_div,l_total,seconds";

/// Load and normalize every training image at the model input size.
pub fn normalized_train_images<P: Real>(
    config: &ConfigFile,
    ds: &Dataset,
) -> Result<Vec<Tensor<P>>> {
    let (h, w) = (config.encoder.input_size[0], config.encoder.input_size[1]);
    let mut images = Vec::with_capacity(ds.train.len());
    for entry in &ds.train {
        let (ih, iw, px) = dataset::load_pixels(entry)?;
        let data: Vec<P> = px.iter().map(|&v| P::from_f64(v as f64)).collect();
        let t = Tensor::from_vec(vec![1, 1, ih, iw], data).map_err(AppError::from)?;
        images.push(normalize(&t, h, w).map_err(AppError::from)?);
    }
    Ok(images)
}

pub fn trainer_config(config: &ConfigFile) -> Result<TrainerConfig> {
    Ok(TrainerConfig {
        model: config.model_config()?,
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        lr_max: config.train.lr_max,
        lr_min: config.train.lr_min,
        adam: config.adam(),
        train_seed: config.train.seed,
    })
}

fn format_row(epoch: usize, lr: f64, kr: f64, prp: f64, div: f64, total: f64, secs: f64) -> String {
    format!("{epoch},{lr},{kr},{prp},{div},{total},{secs:.3}\n")
}

/// Run training to `config.train.epochs`, starting fresh or from a resume
/// checkpoint, and write `train_log.csv`, `config.json` and
/// `checkpoint.pdd` under `out_dir`.
pub fn run<P: Real>(
    config: &ConfigFile,
    ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Io(format!("creating {}: {e}", out_dir.display())))?;
    let images = normalized_train_images::<P>(config, ds)?;
    let mut trainer =
        Trainer::new(trainer_config(config)?, &images).map_err(AppError::from)?;
    if let Some(ck) = resume {
        ck.restore_into(&mut trainer)?;
        if ck.header.dataset_digest != ds.digest {
            return Err(AppError::Config(format!(
                "resume dataset digest {:016x} does not match checkpoint {:016x}",
                ds.digest, ck.header.dataset_digest
            )));
        }
    }
    let teacher_digest = trainer.bundle.teacher_digest();

    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    let target_epochs = config.train.epochs;
    while trainer.epochs_done < target_epochs {
        let t0 = std::time::Instant::now();
        let stats = trainer.run_epoch().map_err(|e| match e {
            pdd_core::Error::NonFinite { op } => AppError::Numeric(format!(
                "training aborted: first non-finite value produced by op `{op}` at epoch {}",
                trainer.epochs_done + 1
            )),
            other => AppError::from(other),
        })?;
        let secs = if config.train.log_timing {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.push_str(&format_row(
            stats.epoch,
            stats.lr,
            stats.kr,
            stats.prp,
            stats.div,
            stats.total,
            secs,
        ));
        if stats.epoch % 10 == 0 || stats.epoch == target_epochs {
            eprintln!(
                "epoch {:>4}/{target_epochs}  lr {:.3e}  l_total {:.6}",
                stats.epoch, stats.lr, stats.total
            );
        }
    }
    debug_assert_eq!(trainer.bundle.teacher_digest(), teacher_digest);

    std::fs::write(out_dir.join("train_log.csv"), log)
        .map_err(|e| AppError::Io(format!("writing train log: {e}")))?;
    std::fs::write(out_dir.join("config.json"), config.canonical_json())
        .map_err(|e| AppError::Io(format!("writing config echo: {e}")))?;
    let ck = Checkpoint::from_trainer(&trainer, config, ds.digest);
    ck.save(&out_dir.join("checkpoint.pdd"))?;
    Ok(())
}

/// Precision dispatch for the CLI.
pub fn run_dispatch(
    config: &ConfigFile,
    ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<()> {
    match config.precision()? {
        Precision::F32 => run::<f32>(config, ds, out_dir, resume),
        Precision::F64 => run::<f64>(config, ds, out_dir, resume),
    }
}
