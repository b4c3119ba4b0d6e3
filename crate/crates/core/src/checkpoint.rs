//! Binary checkpoints.
//!
//! Layout (little endian): magic `CBTK`, `u32` format version, `u64` length
//! of a canonical-JSON metadata block, the block, `u64` record count, then
//! per record: `u32` name length, UTF-8 name, `u32` rank, `u64` extents,
//! `f64` values. Parameters are stored under their own names, Adam moments
//! under `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CbtError, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::synthdata::{canonical_json, CorpusSpec};
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"CBTK";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Saved on schedule or at the end of a run.
    Regular,
    /// Saved after a numerical failure, for inspection only.
    Diagnostic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub crate_version: String,
    pub kind: CheckpointKind,
    pub seed: u64,
    pub warmup_done: usize,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<CorpusSpec>,
    pub frozen_groups: Vec<String>,
    pub adam_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, corpus: Option<&CorpusSpec>, kind: CheckpointKind) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                kind,
                seed: t.train.seed,
                warmup_done: t.warmup_done,
                step: t.step,
                model: t.model.clone(),
                train: t.train.clone(),
                corpus: corpus.cloned(),
                frozen_groups: t.store.frozen_groups().iter().cloned().collect(),
                adam_steps: t.adam.t.clone(),
            },
            store: t.store.clone(),
            adam: t.adam.clone(),
        }
    }

    /// Resumable trainer; the store is validated against the model layout.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut adam = self.adam;
        adam.t = self.meta.adam_steps;
        Trainer::from_parts(self.meta.model, self.meta.train, self.store, adam, self.meta.warmup_done, self.meta.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = canonical_json(&self.meta)?;
        let mut records: Vec<(String, &Tensor)> = self.store.iter().map(|(k, v)| (k.clone(), v)).collect();
        records.extend(self.adam.m.iter().map(|(k, v)| (format!("{ADAM_M}{k}"), v)));
        records.extend(self.adam.v.iter().map(|(k, v)| (format!("{ADAM_V}{k}"), v)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CbtError::BadMagic)? != MAGIC {
            return Err(CbtError::BadMagic);
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CbtError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = r.len("metadata length")?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u64("record count")?;
        let mut store = ParamStore::new();
        let mut adam = Adam::default();
        for i in 0..count {
            let what = format!("record {i}");
            let name_len = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
                .map_err(|_| CbtError::Data(format!("{what} has a non-UTF-8 name")))?;
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len(&name)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CbtError::Data(format!("{name} has an overflowing shape")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CbtError::Truncated(name.clone()))?, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix(ADAM_M) {
                adam.m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                adam.v.insert(p.to_string(), t);
            } else {
                store.insert(name, t)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(CbtError::Data(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
        }
        meta.model.check_store(&store)?;
        for g in &meta.frozen_groups {
            store.freeze_group(g);
        }
        adam.t = meta.adam_steps.clone();
        Ok(Self { meta, store, adam })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CbtError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CbtError::Truncated(what.to_string()))
    }
}
