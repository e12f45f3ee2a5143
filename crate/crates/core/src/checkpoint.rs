//! Checkpoint files: `KVCK` magic, u32 format version, u64 manifest length,
//! the JSON manifest, a SHA-256 over manifest and blob, then the blob of
//! little-endian f32 values (parameters first, optimizer moments after).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::nn::{AdamWConfig, OptimizerState, ParamStore};
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &[u8; 4] = b"KVCK";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Autoencoder,
    ImageUnet,
    Keyframe,
    Interpolation,
    Mfi,
    VideoDecoder,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    /// Parameter index.
    pub param: usize,
    pub offset: usize,
    pub len: usize,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerEntry {
    pub config: AdamWConfig,
    pub optimizer_step: u64,
    pub data_step: usize,
    pub accumulation: usize,
    pub seed: u64,
    /// First and second moment per parameter; both slices have `len` elements.
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub variant: String,
    /// SHA-256 of `config`.
    pub config_hash: String,
    /// Model configuration as JSON text.
    pub config: String,
    pub step: usize,
    pub params: Vec<ParamEntry>,
    pub trainer: Option<TrainerEntry>,
    /// Free-form extras such as the latent scale.
    pub meta: BTreeMap<String, String>,
    /// Total f32 elements in the blob.
    pub blob_len: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub trainer: Option<Trainer>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    crate::hex(&Sha256::digest(bytes))
}

impl Checkpoint {
    /// Snapshot of a model. A trainer with gradients pending mid-accumulation
    /// cannot be resumed exactly and is rejected.
    pub fn new(
        kind: ModelKind,
        variant: impl Into<String>,
        config: &impl Serialize,
        params: &ParamStore,
        trainer: Option<&Trainer>,
    ) -> Result<Self> {
        if trainer.is_some_and(Trainer::has_pending) {
            return Err(Error::Training("cannot checkpoint between accumulation steps".into()));
        }
        let config = serde_json::to_string(config)?;
        let mut offset = 0;
        let entries = params
            .iter()
            .map(|(_, p)| {
                let e = ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset, trainable: p.trainable };
                offset += p.value.numel();
                e
            })
            .collect();
        let trainer_entry = trainer.map(|t| {
            let moments = t
                .opt
                .state
                .moments
                .iter()
                .map(|(&param, (m, _))| {
                    let e = MomentEntry { param, offset, len: m.len() };
                    offset += 2 * m.len();
                    e
                })
                .collect();
            TrainerEntry {
                config: t.opt.config.clone(),
                optimizer_step: t.opt.state.step,
                data_step: t.step,
                accumulation: t.accumulation,
                seed: t.seed,
                moments,
            }
        });
        let manifest = CheckpointManifest {
            kind,
            variant: variant.into(),
            config_hash: sha256_hex(config.as_bytes()),
            config,
            step: trainer.map_or(0, |t| t.step),
            params: entries,
            trainer: trainer_entry,
            meta: BTreeMap::new(),
            blob_len: offset,
        };
        Ok(Checkpoint { manifest, params: params.clone(), trainer: trainer.cloned() })
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.manifest.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.manifest
            .meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corruption(format!("checkpoint lacks `{key}`")))
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.manifest.config)?)
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest.blob_len * 4);
        for (_, p) in self.params.iter() {
            p.value.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
        }
        if let Some(t) = &self.trainer {
            for (m, v) in t.opt.state.moments.values() {
                m.iter().chain(v).for_each(|x| out.extend(x.to_le_bytes()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let blob = self.blob();
        let mut h = Sha256::new();
        h.update(&manifest);
        h.update(&blob);
        let mut out = Vec::with_capacity(HEADER + manifest.len() + 32 + blob.len());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((manifest.len() as u64).to_le_bytes());
        out.extend(&manifest);
        out.extend(h.finalize());
        out.extend(blob);
        Ok(out)
    }

    /// Writes through a temporary file so a crash never leaves a truncated checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::Corruption(m);
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER..];
        if body.len() < mlen.saturating_add(32) {
            return Err(corrupt("truncated manifest".into()));
        }
        let (manifest_bytes, rest) = body.split_at(mlen);
        let (sum, blob) = rest.split_at(32);
        let mut h = Sha256::new();
        h.update(manifest_bytes);
        h.update(blob);
        if h.finalize().as_slice() != sum {
            return Err(corrupt("checksum mismatch".into()));
        }
        let manifest: CheckpointManifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if blob.len() != manifest.blob_len * 4 {
            return Err(corrupt(format!("blob holds {} bytes, manifest says {} values", blob.len(), manifest.blob_len)));
        }
        if sha256_hex(manifest.config.as_bytes()) != manifest.config_hash {
            return Err(corrupt("config hash mismatch".into()));
        }
        let values: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let slice = |offset: usize, len: usize| -> Result<Vec<f32>> {
            values
                .get(offset..offset.checked_add(len).unwrap_or(usize::MAX))
                .map(<[f32]>::to_vec)
                .ok_or_else(|| corrupt(format!("range {offset}+{len} outside the blob")))
        };
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let n = e.shape.iter().product();
            params.insert(e.name.clone(), Tensor::from_vec(slice(e.offset, n)?, &e.shape)?, e.trainable)?;
        }
        let trainer = match &manifest.trainer {
            None => None,
            Some(te) => {
                let mut t = Trainer::new(te.config.clone(), te.accumulation, te.seed)?;
                t.step = te.data_step;
                let mut state = OptimizerState { step: te.optimizer_step, ..Default::default() };
                for m in &te.moments {
                    if m.param >= params.len() {
                        return Err(corrupt(format!("moment for missing parameter {}", m.param)));
                    }
                    state.moments.insert(m.param, (slice(m.offset, m.len)?, slice(m.offset + m.len, m.len)?));
                }
                t.opt.state = state;
                Some(t)
            }
        };
        Ok(Checkpoint { manifest, params, trainer })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Dependency(format!("checkpoint {} not found", path.display())),
            _ => e.into(),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the model kind.
    pub fn load_kind(path: impl AsRef<Path>, kind: ModelKind) -> Result<Self> {
        let c = Self::load(path)?;
        if c.manifest.kind != kind {
            return Err(Error::KindMismatch { expected: kind.to_string(), found: c.manifest.kind.to_string() });
        }
        Ok(c)
    }

    /// Copies every parameter value and trainable flag into `target`, which
    /// must hold the same names and shapes in the same order.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(config_err!("checkpoint has {} parameters, model has {}", self.params.len(), target.len()));
        }
        for (i, p) in self.params.iter() {
            let id = target.id_of(&p.name).ok_or_else(|| config_err!("model has no parameter `{}`", p.name))?;
            // optimizer moments are keyed by position
            if id != i || target.get(id).shape() != p.value.shape() {
                return Err(config_err!("parameter `{}` is {:?} at {} in the checkpoint", p.name, p.value.shape(), i.index()));
            }
            target.set_trainable(id, p.trainable);
            target.set_data(id, p.value.to_vec())?;
        }
        Ok(())
    }
}
