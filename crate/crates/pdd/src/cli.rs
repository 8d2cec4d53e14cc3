//! Command-line interface. Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric,
//! 5 metric undefined.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::ablate::{self, AblationPlan};
use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::dataset;
use crate::error::{AppError, Result};
use crate::{evalrun, train};

#[derive(Parser)]
#[command(name = "pdd", version, about = "Dual-teacher dual-student reverse-distillation anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic dataset.
    GenData {
        /// Run configuration (JSON); `{}` for defaults.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the normal samples of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (from gen-data or the documented layout).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint (its embedded config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: metrics report plus per-sample anomaly maps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate even if the dataset digest differs from the one recorded
        /// at training time.
        #[arg(long, default_value_t = false)]
        allow_mismatch: bool,
    },
    /// Run named config variants over several seeds and write mean metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// JSON plan: {"variants": ["rd_1t1s", "full_2t2s+score=ss", ...]}.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs per variant; seed k uses train.seed + k.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Worker threads for training runs (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ConfigFile::load(&config)?;
            dataset::generate_to_disk(&cfg.synthetic_spec(), &out)?;
            std::fs::write(out.join("config.json"), cfg.canonical_json())
                .map_err(|e| AppError::Io(format!("writing config echo: {e}")))?;
            eprintln!(
                "dataset written to {} ({} train / {} test normal / {} test abnormal)",
                out.display(),
                cfg.synthetic.n_train_normal,
                cfg.synthetic.n_test_normal,
                cfg.synthetic.n_test_abnormal
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let resume_ck = match &resume {
                Some(path) => Some(Checkpoint::load(path)?),
                None => None,
            };
            // A resumed run continues under the checkpoint's embedded config.
            let cfg = match &resume_ck {
                Some(ck) => {
                    ck.header.config.validate()?;
                    ck.header.config.clone()
                }
                None => ConfigFile::load(&config)?,
            };
            let ds = dataset::load_dataset(&data)?;
            train::run_dispatch(&cfg, &ds, &out, resume_ck.as_ref())?;
            eprintln!("checkpoint and train log written to {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            allow_mismatch,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = ck.header.config.clone();
            cfg.validate()?;
            let ds = dataset::load_dataset(&data)?;
            if ds.digest != ck.header.dataset_digest && !allow_mismatch {
                return Err(AppError::Config(format!(
                    "dataset digest {:016x} differs from the one recorded at training time \
                     ({:016x}); pass --allow-mismatch to evaluate anyway",
                    ds.digest, ck.header.dataset_digest
                )));
            }
            let report = evalrun::run_dispatch(&cfg, &ck, &ds, &out)?;
            if let Some(m) = &report.metrics {
                eprintln!(
                    "auroc {:.4}  ap {:.4}  f1_max {:.4}  ({} samples)",
                    m.auroc,
                    m.ap,
                    m.f1_max,
                    report.samples.len()
                );
            }
            Ok(())
        }
        Command::Ablate {
            config,
            plan,
            out,
            seeds,
            jobs,
        } => {
            let cfg = ConfigFile::load(&config)?;
            let plan = AblationPlan::load(&plan)?;
            let jobs = jobs.unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
            let results = ablate::run_dispatch(&cfg, &plan, seeds, jobs)?;
            ablate::write_outputs(&out, &cfg, &results, seeds)?;
            for r in &results {
                eprintln!(
                    "{:<40} auroc {:.4}  ap {:.4}  f1_max {:.4}  (mean of {seeds})",
                    r.name, r.mean.auroc, r.mean.ap, r.mean.f1_max
                );
            }
            Ok(())
        }
    }
}
