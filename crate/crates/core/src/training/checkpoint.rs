//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SEMN" | u32 version | u64 n | n bytes JSON metadata
//! repeated: u32 name_len | name | u64 count | count x f32
//! u64 FNV-1a digest of every preceding byte
//! ```
//!
//! Blob names are prefixed `param/`, `opt1/`, `opt2/` (optimizer moments)
//! and `best/` (best-validation parameters).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::{BestSnapshot, EpochRecord, TrainConfig, TrainState};
use super::optim::{Optimizer, OptimizerConfig};
use crate::error::{Error, Result};
use crate::nn::{build_model, Init, Model, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SEMN";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: OptimizerConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    class_names: Vec<String>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    /// Seed of the derived random streams; with `epoch` it fixes the state
    /// of every generator at the next epoch boundary.
    #[serde(default)]
    rng_seed: Option<u64>,
    epoch: usize,
    step: u64,
    history: Vec<EpochRecord>,
    optimizer: Option<OptimizerMeta>,
    best: Option<(usize, f64)>,
    blobs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
    pub optimizer: Option<OptimizerMeta>,
    pub best: Option<(usize, f64)>,
    pub blobs: Vec<Blob>,
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f64_lossy() as f32).collect()
}

fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of(x as f64)).collect()
}

impl Checkpoint {
    /// Parameters and buffers of `model` only.
    pub fn from_model<T: Scalar>(model: &Model<T>, class_names: &[String]) -> Self {
        let blobs = model
            .store()
            .entries()
            .iter()
            .map(|e| Blob { name: format!("param/{}", e.name), data: to_f32(e.tensor.data()) })
            .collect();
        Checkpoint {
            model: model.config().clone(),
            class_names: class_names.to_vec(),
            train_config: None,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            optimizer: None,
            best: None,
            blobs,
        }
    }

    /// Model plus everything needed to resume training.
    pub fn from_training<T: Scalar>(model: &Model<T>, class_names: &[String], cfg: &TrainConfig, state: &TrainState<T>) -> Self {
        let mut ck = Self::from_model(model, class_names);
        ck.train_config = Some(cfg.clone());
        ck.epoch = state.epoch;
        ck.step = state.step;
        ck.history = state.history.clone();
        ck.optimizer = Some(OptimizerMeta { config: state.optimizer.config, step: state.optimizer.step });
        for (name, m1, m2) in &state.optimizer.slots {
            ck.blobs.push(Blob { name: format!("opt1/{name}"), data: to_f32(m1) });
            if !m2.is_empty() {
                ck.blobs.push(Blob { name: format!("opt2/{name}"), data: to_f32(m2) });
            }
        }
        if let Some(b) = &state.best {
            ck.best = Some((b.epoch, b.score));
            for (e, v) in model.store().entries().iter().zip(&b.values) {
                ck.blobs.push(Blob { name: format!("best/{}", e.name), data: to_f32(v) });
            }
        }
        ck
    }

    pub fn blob(&self, name: &str) -> Option<&[f32]> {
        self.blobs.iter().find(|b| b.name == name).map(|b| b.data.as_slice())
    }

    fn filled_model<T: Scalar>(&self, prefix: &str) -> Result<Model<T>> {
        let mut model = build_model::<T>(&self.model, Init::Zeros, 0)?;
        for i in 0..model.store().len() {
            let name = model.store().entry(i).name.clone();
            let key = format!("{prefix}/{name}");
            let data = self.blob(&key).ok_or_else(|| Error::Checkpoint(format!("missing blob '{key}'")))?;
            let t = model.store_mut().tensor_mut(i);
            if data.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "blob '{key}' holds {} values, parameter needs {}",
                    data.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(&from_f32::<T>(data));
        }
        Ok(model)
    }

    /// The model with its latest parameters.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        self.filled_model("param")
    }

    /// The best-validation model if one was recorded, else the latest.
    pub fn best_model<T: Scalar>(&self) -> Result<Model<T>> {
        if self.best.is_some() {
            self.filled_model("best")
        } else {
            self.model()
        }
    }

    /// Training state for resuming, if the checkpoint carries one.
    pub fn train_state<T: Scalar>(&self, model: &Model<T>) -> Result<Option<TrainState<T>>> {
        let Some(meta) = &self.optimizer else { return Ok(None) };
        let mut optimizer = Optimizer::new(meta.config, model.store())?;
        optimizer.step = meta.step;
        for (name, m1, m2) in &mut optimizer.slots {
            let a = self.blob(&format!("opt1/{name}")).ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for '{name}'")))?;
            if a.len() != m1.len() {
                return Err(Error::Checkpoint(format!("optimizer state for '{name}' has the wrong length")));
            }
            *m1 = from_f32(a);
            if !m2.is_empty() {
                let b = self.blob(&format!("opt2/{name}")).ok_or_else(|| Error::Checkpoint(format!("missing second moment for '{name}'")))?;
                if b.len() != m2.len() {
                    return Err(Error::Checkpoint(format!("second moment for '{name}' has the wrong length")));
                }
                *m2 = from_f32(b);
            }
        }
        let best = match self.best {
            Some((epoch, score)) => {
                let values = model
                    .store()
                    .entries()
                    .iter()
                    .map(|e| {
                        self.blob(&format!("best/{}", e.name))
                            .map(from_f32)
                            .ok_or_else(|| Error::Checkpoint(format!("missing best value for '{}'", e.name)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(BestSnapshot { epoch, score, values })
            }
            None => None,
        };
        Ok(Some(TrainState { epoch: self.epoch, step: self.step, optimizer, history: self.history.clone(), best }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Metadata {
            model: self.model.clone(),
            class_names: self.class_names.clone(),
            train_config: self.train_config.clone(),
            rng_seed: self.train_config.as_ref().map(|c| c.seed),
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
            optimizer: self.optimizer.clone(),
            best: self.best,
            blobs: self.blobs.iter().map(|b| b.name.clone()).collect(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.data.len() as u64).to_le_bytes());
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = fnv1a64(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        if bytes.len() < 8 + 8 + 8 {
            return Err(Error::Checkpoint("truncated file: digest mismatch".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Checkpoint("digest mismatch (file truncated or corrupted)".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let n = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut blobs = Vec::with_capacity(meta.blobs.len());
        for expected in &meta.blobs {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            if &name != expected {
                return Err(Error::Checkpoint(format!("blob '{name}' out of order, expected '{expected}'")));
            }
            let count = r.u64()? as usize;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blobs.push(Blob { name, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last blob".into()));
        }
        meta.model.infer_shapes()?;
        Ok(Checkpoint {
            model: meta.model,
            class_names: meta.class_names,
            train_config: meta.train_config,
            epoch: meta.epoch,
            step: meta.step,
            history: meta.history,
            optimizer: meta.optimizer,
            best: meta.best,
            blobs,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
