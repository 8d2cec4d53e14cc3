//! On-disk datasets: generation into the canonical layout, ingestion back
//! into memory, and the manifest digest that ties checkpoints to data.
//!
//! Layout: `root/train/normal/*.pgm`, `root/test/normal/*.pgm`,
//! `root/test/abnormal/*.pgm`, plus `labels.csv` with `id,split,label` rows
//! where `id` is the file path relative to the root without the extension.

use std::path::{Path, PathBuf};

use pdd_core::data::{gen_abnormal, gen_normal, Sample, SyntheticSpec, TEST_NORMAL_OFFSET};
use pdd_core::digest::Digest64;

use crate::error::{AppError, Result};
use crate::pgm::{self, GrayImage};

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// FNV-1a over ids, splits, labels and pixel bytes.
    pub digest: u64,
}

fn quantize(sample: &Sample) -> GrayImage {
    GrayImage {
        width: sample.width,
        height: sample.height,
        pixels: sample
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}

/// Write the synthetic dataset for `spec` under `root`.
pub fn generate_to_disk(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    spec.validate().map_err(AppError::from)?;
    let dirs = [
        root.join("train/normal"),
        root.join("test/normal"),
        root.join("test/abnormal"),
    ];
    for d in &dirs {
        std::fs::create_dir_all(d)
            .map_err(|e| AppError::Io(format!("creating {}: {e}", d.display())))?;
    }
    let mut rows: Vec<(String, &str, u8)> = Vec::new();
    for i in 0..spec.n_train_normal as u64 {
        let s = gen_normal(spec, i);
        let rel = format!("train/normal/{}", s.id);
        pgm::write_pgm(&root.join(format!("{rel}.pgm")), &quantize(&s))?;
        rows.push((rel, "train", 0));
    }
    // Test normals draw from a disjoint index range of the same generator.
    for i in 0..spec.n_test_normal as u64 {
        let s = gen_normal(spec, TEST_NORMAL_OFFSET + i);
        let rel = format!("test/normal/{}", s.id);
        pgm::write_pgm(&root.join(format!("{rel}.pgm")), &quantize(&s))?;
        rows.push((rel, "test", 0));
    }
    for i in 0..spec.n_test_abnormal as u64 {
        let s = gen_abnormal(spec, i);
        let rel = format!("test/abnormal/{}", s.id);
        pgm::write_pgm(&root.join(format!("{rel}.pgm")), &quantize(&s))?;
        rows.push((rel, "test", 1));
    }
    rows.sort();
    let mut csv = String::from("id,split,label\n");
    for (id, split, label) in rows {
        csv.push_str(&format!("{id},{split},{label}\n"));
    }
    std::fs::write(root.join("labels.csv"), csv)
        .map_err(|e| AppError::Io(format!("writing labels.csv: {e}")))?;
    Ok(())
}

fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AppError::Io(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Load manifests from `root`. The directory layout is authoritative when
/// `train/` exists; otherwise `labels.csv` drives ingestion. Training data
/// containing an abnormal label is a protocol violation.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    if root.join("train").exists() {
        for p in list_pgms(&root.join("train/normal"))? {
            train.push(entry(root, &p, 0)?);
        }
        // Abnormal files under train/ violate the training protocol.
        let bad = list_pgms(&root.join("train/abnormal"))?;
        if !bad.is_empty() {
            return Err(AppError::Config(format!(
                "protocol violation: {} abnormal file(s) under train/",
                bad.len()
            )));
        }
        for p in list_pgms(&root.join("test/normal"))? {
            test.push(entry(root, &p, 0)?);
        }
        for p in list_pgms(&root.join("test/abnormal"))? {
            test.push(entry(root, &p, 1)?);
        }
    } else {
        let csv_path = root.join("labels.csv");
        let text = std::fs::read_to_string(&csv_path).map_err(|e| {
            AppError::Io(format!(
                "no train/ directory and no readable labels.csv under {}: {e}",
                root.display()
            ))
        })?;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(AppError::Io(format!(
                    "labels.csv line {}: expected id,split,label",
                    lineno + 1
                )));
            }
            let (id, split, label) = (parts[0], parts[1], parts[2]);
            let label: u8 = label.parse().map_err(|_| {
                AppError::Io(format!("labels.csv line {}: bad label", lineno + 1))
            })?;
            let e = ManifestEntry {
                id: id.to_string(),
                path: root.join(format!("{id}.pgm")),
                label,
            };
            match split {
                "train" => {
                    if label != 0 {
                        return Err(AppError::Config(format!(
                            "protocol violation: labels.csv line {} puts an abnormal sample in train",
                            lineno + 1
                        )));
                    }
                    train.push(e);
                }
                "test" => test.push(e),
                other => {
                    return Err(AppError::Io(format!(
                        "labels.csv line {}: unknown split `{other}`",
                        lineno + 1
                    )));
                }
            }
        }
        train.sort_by(|a, b| a.id.cmp(&b.id));
        test.sort_by(|a, b| a.id.cmp(&b.id));
    }

    // Verify files exist up front and compute the manifest digest.
    let mut missing = Vec::new();
    let mut digest = Digest64::new();
    for e in train.iter().chain(test.iter()) {
        match std::fs::read(&e.path) {
            Ok(bytes) => {
                digest.update(e.id.as_bytes());
                digest.update(&[e.label]);
                digest.update(&bytes);
            }
            Err(_) => missing.push(e.path.display().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(AppError::Io(format!(
            "missing dataset files: {}",
            missing.join(", ")
        )));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        train,
        test,
        digest: digest.finish(),
    })
}

fn entry(root: &Path, path: &Path, label: u8) -> Result<ManifestEntry> {
    let rel = path
        .strip_prefix(root)
        .map_err(|_| AppError::Io("path outside dataset root".into()))?;
    let id = rel
        .with_extension("")
        .to_string_lossy()
        .replace('\\', "/");
    Ok(ManifestEntry {
        id,
        path: path.to_path_buf(),
        label,
    })
}

/// Read one sample's pixels as [0,1] floats.
pub fn load_pixels(entry: &ManifestEntry) -> Result<(usize, usize, Vec<f32>)> {
    let img = pgm::read_pgm(&entry.path)?;
    let px: Vec<f32> = img.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((img.height, img.width, px))
}
