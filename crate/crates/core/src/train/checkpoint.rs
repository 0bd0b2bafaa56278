//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CXRCKPT\0"
//! version      u32      1
//! fingerprint  u32 length + UTF-8 bytes
//! metadata     u32 length + block:
//!                task u8 (0 none, 1 classification, 2 lm, 3 mlm)
//!                epoch u32
//!                has_cider u8, cider f64 (0.0 when absent)
//!                seed u64
//! count        u32
//! entries      count × (name: u32 length + UTF-8, rank u32, dims rank × u64,
//!                       values: product(dims) × f32)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: [u8; 8] = *b"CXRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint fingerprint {found} does not match model {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("checkpoint does not fit the model: {0}")]
    Incompatible(CheckpointDiff),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTask {
    None,
    Classification,
    Lm,
    Mlm,
}

impl PretrainTask {
    fn code(self) -> u8 {
        match self {
            PretrainTask::None => 0,
            PretrainTask::Classification => 1,
            PretrainTask::Lm => 2,
            PretrainTask::Mlm => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::None, Self::Classification, Self::Lm, Self::Mlm].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: PretrainTask,
    pub epoch: u32,
    pub val_cider: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointDiff {
    /// In the checkpoint but not in the model.
    pub unexpected: Vec<String>,
    /// (name, checkpoint shape, model shape)
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl CheckpointDiff {
    pub fn is_empty(&self) -> bool {
        self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }
}

impl std::fmt::Display for CheckpointDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.unexpected.is_empty() {
            parts.push(format!("unknown parameters [{}]", self.unexpected.join(", ")));
        }
        for (name, a, b) in &self.shape_mismatch {
            parts.push(format!("{name}: checkpoint {a:?} vs model {b:?}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Malformed(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// Snapshots the parameters whose names pass `keep`, in store order.
    pub fn capture(store: &ParamStore, fingerprint: &str, meta: CheckpointMeta, keep: impl Fn(&str) -> bool) -> Self {
        let entries = store
            .iter()
            .filter(|(_, name, _)| keep(name))
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|x| *x as f32).collect(),
            })
            .collect();
        Self {
            fingerprint: fingerprint.to_string(),
            meta,
            entries,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        let mut meta = vec![self.meta.task.code()];
        meta.extend_from_slice(&self.meta.epoch.to_le_bytes());
        meta.push(u8::from(self.meta.val_cider.is_some()));
        meta.extend_from_slice(&self.meta.val_cider.unwrap_or(0.0).to_le_bytes());
        meta.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Malformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let fingerprint = r.string()?;
        let meta_len = r.u32()? as usize;
        let block = r.take(meta_len)?;
        let mut m = Reader { buf: block, pos: 0 };
        let task = PretrainTask::from_code(m.u8()?).ok_or_else(|| CheckpointError::Malformed("unknown task".into()))?;
        let epoch = m.u32()?;
        let has_cider = m.u8()? != 0;
        let cider = f64::from_bits(m.u64()?);
        let seed = m.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            entries.push(Entry { name, shape, values });
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            fingerprint,
            meta: CheckpointMeta {
                task,
                epoch,
                val_cider: has_cider.then_some(cider),
                seed,
            },
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn diff(&self, store: &ParamStore) -> CheckpointDiff {
        let mut d = CheckpointDiff::default();
        for e in &self.entries {
            match store.id(&e.name) {
                None => d.unexpected.push(e.name.clone()),
                Some(id) => {
                    let shape = store.value(id).shape();
                    if shape != e.shape.as_slice() {
                        d.shape_mismatch.push((e.name.clone(), e.shape.clone(), shape.to_vec()));
                    }
                }
            }
        }
        d
    }

    /// Copies every entry into `store`. Refuses, leaving the store untouched,
    /// when the fingerprint differs or any entry does not fit.
    pub fn apply(&self, store: &mut ParamStore, expected_fingerprint: &str) -> Result<usize, CheckpointError> {
        if self.fingerprint != expected_fingerprint {
            return Err(CheckpointError::Fingerprint {
                expected: expected_fingerprint.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        let diff = self.diff(store);
        if !diff.is_empty() {
            return Err(CheckpointError::Incompatible(diff));
        }
        for e in &self.entries {
            let id = store.id(&e.name).expect("checked by diff");
            *store.value_mut(id) = Tensor::new(&e.shape, e.values.iter().map(|v| f64::from(*v)).collect())
                .map_err(|err| CheckpointError::Malformed(err.to_string()))?;
        }
        Ok(self.entries.len())
    }
}
