//! Checkpoint container.
//!
//! Layout:
//! ```text
//! bytes 0..4          magic "PDD1"
//! bytes 4..8          u32 LE header length
//! bytes 8..8+len      JSON header (config echo, counters, RNG state,
//!                     dataset digest, blob manifest)
//! ...                 payload: little-endian f32 blobs at the manifest
//!                     offsets (parameters, Adam moments, BN statistics)
//! last 8 bytes        u64 LE FNV-1a digest of everything before it
//! ```
//! Save -> load -> save is byte-identical; the digest is verified on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pdd_core::digest::digest_bytes;
use pdd_core::model::Trainer;
use pdd_core::real::Real;
use pdd_core::tensor::Tensor;

use crate::config::ConfigFile;
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"PDD1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum BlobKind {
    #[serde(rename = "frozen")]
    Frozen,
    #[serde(rename = "param")]
    Param,
    #[serde(rename = "adam_m")]
    AdamM,
    #[serde(rename = "adam_v")]
    AdamV,
    #[serde(rename = "state")]
    State,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 units.
    pub offset: usize,
    pub len: usize,
    pub kind: BlobKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: ConfigFile,
    pub steps_done: u64,
    pub epochs_done: u64,
    pub adam_t: u64,
    pub rng_state: [u64; 4],
    pub dataset_digest: u64,
    pub manifest: Vec<BlobEntry>,
}

pub struct Checkpoint {
    pub header: Header,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    /// Snapshot a trainer. Blob order: frozen teacher parameters, trainable
    /// parameters, Adam first and second moments (trainable order), then
    /// BN running statistics.
    pub fn from_trainer<P: Real>(
        trainer: &Trainer<P>,
        config: &ConfigFile,
        dataset_digest: u64,
    ) -> Self {
        let mut manifest = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: BlobKind, values: &mut dyn Iterator<Item = f32>, payload: &mut Vec<f32>| {
            let offset = payload.len();
            payload.extend(values);
            manifest.push(BlobEntry {
                name,
                shape,
                offset,
                len: payload.len() - offset,
                kind,
            });
        };

        for p in trainer.bundle.teacher_params() {
            push(
                p.name().to_string(),
                p.value().shape().to_vec(),
                BlobKind::Frozen,
                &mut p.value().data().iter().map(|v| v.to_f64() as f32),
                &mut payload,
            );
        }
        let trainable: Vec<(String, Vec<usize>, Vec<f32>)> = trainer
            .bundle
            .trainable_params()
            .iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    p.value().shape().to_vec(),
                    p.value().data().iter().map(|v| v.to_f64() as f32).collect(),
                )
            })
            .collect();
        for (name, shape, values) in &trainable {
            push(
                name.clone(),
                shape.clone(),
                BlobKind::Param,
                &mut values.iter().copied(),
                &mut payload,
            );
        }
        for (kind, moments) in [(BlobKind::AdamM, &trainer.adam.m), (BlobKind::AdamV, &trainer.adam.v)] {
            for ((name, shape, _), buf) in trainable.iter().zip(moments.iter()) {
                push(
                    format!(
                        "{}.{}",
                        name,
                        if kind == BlobKind::AdamM { "adam_m" } else { "adam_v" }
                    ),
                    shape.clone(),
                    kind.clone(),
                    &mut buf.iter().map(|v| v.to_f64() as f32),
                    &mut payload,
                );
            }
        }
        for (name, values) in trainer.bundle.states() {
            let len = values.len();
            push(
                name,
                vec![len],
                BlobKind::State,
                &mut values.iter().map(|v| v.to_f64() as f32),
                &mut payload,
            );
        }

        Checkpoint {
            header: Header {
                config: config.clone(),
                steps_done: trainer.steps_done,
                epochs_done: trainer.epochs_done as u64,
                adam_t: trainer.adam.t,
                rng_state: trainer.shuffle_rng.state(),
                dataset_digest,
                manifest,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = digest_bytes(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| AppError::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(AppError::Io("checkpoint truncated".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(AppError::Io(
                "checkpoint format error: bad magic (want PDD1)".into(),
            ));
        }
        let (body, digest_bytes_slice) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(digest_bytes_slice.try_into().unwrap());
        let computed = digest_bytes(body);
        if stored != computed {
            return Err(AppError::Io(format!(
                "checkpoint corruption: digest mismatch (stored {stored:016x}, computed {computed:016x})"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if 8 + hlen > body.len() {
            return Err(AppError::Io("checkpoint header overruns file".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| AppError::Io(format!("checkpoint header: {e}")))?;
        let payload_bytes = &body[8 + hlen..];
        if payload_bytes.len() % 4 != 0 {
            return Err(AppError::Io("checkpoint payload misaligned".into()));
        }
        let payload: Vec<f32> = payload_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let want: usize = header.manifest.iter().map(|e| e.len).sum();
        if payload.len() != want {
            return Err(AppError::Io(format!(
                "checkpoint payload has {} values, manifest wants {want}",
                payload.len()
            )));
        }
        Ok(Checkpoint { header, payload })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| AppError::Io(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    fn blob(&self, entry: &BlobEntry) -> &[f32] {
        &self.payload[entry.offset..entry.offset + entry.len]
    }

    /// Restore parameters and BN statistics into a freshly built bundle for
    /// the same config (enough for evaluation).
    pub fn restore_bundle<P: Real>(
        &self,
        bundle: &mut pdd_core::model::ModelBundle<P>,
    ) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &BlobEntry> = self
            .header
            .manifest
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        let missing = |name: &str| AppError::Io(format!("checkpoint missing blob `{name}`"));
        {
            let mut params = bundle.all_params_mut();
            for p in params.iter_mut() {
                let e = by_name.get(p.name()).ok_or_else(|| missing(p.name()))?;
                if e.shape != p.value().shape() {
                    return Err(AppError::Io(format!(
                        "checkpoint blob `{}` has shape {:?}, model wants {:?}",
                        e.name,
                        e.shape,
                        p.value().shape()
                    )));
                }
                let data: Vec<P> = self.blob(e).iter().map(|&v| P::from_f64(v as f64)).collect();
                let t = Tensor::from_vec(e.shape.clone(), data).map_err(AppError::from)?;
                p.set_value(t);
            }
        }
        for (name, buf) in bundle.states_mut() {
            let e = by_name.get(name.as_str()).ok_or_else(|| missing(&name))?;
            if e.len != buf.len() {
                return Err(AppError::Io(format!("state size mismatch for `{name}`")));
            }
            *buf = self.blob(e).iter().map(|&v| P::from_f64(v as f64)).collect();
        }
        Ok(())
    }

    /// Restore parameters, optimizer moments, BN statistics and counters
    /// into a freshly built trainer for the same config.
    pub fn restore_into<P: Real>(&self, trainer: &mut Trainer<P>) -> Result<()> {
        use std::collections::HashMap;
        self.restore_bundle(&mut trainer.bundle)?;
        let by_name: HashMap<&str, &BlobEntry> = self
            .header
            .manifest
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        let missing = |name: &str| AppError::Io(format!("checkpoint missing blob `{name}`"));
        // Adam moments, aligned with the canonical trainable order.
        {
            let names: Vec<String> = trainer
                .bundle
                .trainable_params()
                .iter()
                .map(|p| p.name().to_string())
                .collect();
            for (idx, name) in names.iter().enumerate() {
                for (suffix, store) in [("adam_m", 0usize), ("adam_v", 1)] {
                    let key = format!("{name}.{suffix}");
                    let e = by_name.get(key.as_str()).ok_or_else(|| missing(&key))?;
                    let data: Vec<P> =
                        self.blob(e).iter().map(|&v| P::from_f64(v as f64)).collect();
                    let target = if store == 0 {
                        &mut trainer.adam.m[idx]
                    } else {
                        &mut trainer.adam.v[idx]
                    };
                    if target.len() != data.len() {
                        return Err(AppError::Io(format!("moment size mismatch for `{key}`")));
                    }
                    *target = data;
                }
            }
        }
        trainer.steps_done = self.header.steps_done;
        trainer.epochs_done = self.header.epochs_done as usize;
        trainer.adam.t = self.header.adam_t;
        trainer.shuffle_rng = pdd_core::rng::Stream::from_state(self.header.rng_state);
        Ok(())
    }
}
