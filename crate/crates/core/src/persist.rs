//! Binary tensor container and atomic file writes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NNPP" | version u32 | entry count u32 |
//!   { name len u32 | name UTF-8 | dtype u8 | rank u32 | extents u32* | payload }*
//! ```
//!
//! dtype 0 holds `f32` values; dtype 1 holds UTF-8 text (one extent, the
//! byte length), used for JSON metadata. Entries are written in name order,
//! so equal containers serialize to equal bytes.
//!
//! Checkpoints store the model config, unit flavours and every stored
//! parameter and buffer. Scale/shift values derived from a passport are
//! never stored.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, UnitNorm};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNPP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_UTF8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Text(String),
}

/// Named tensors and text blobs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        self.insert(name, Entry::Tensor(t))
    }

    pub fn insert_text(&mut self, name: impl Into<String>, s: impl Into<String>) -> Result<()> {
        self.insert(name, Entry::Text(s.into()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Text(_)) => Err(Error::Format(format!("entry {name:?} is text, not a tensor"))),
            None => Err(Error::Format(format!("missing entry {name:?}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(Entry::Tensor(_)) => Err(Error::Format(format!("entry {name:?} is a tensor, not text"))),
            None => Err(Error::Format(format!("missing entry {name:?}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(DTYPE_F32);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    out.extend_from_slice(&t.to_le_bytes());
                }
                Entry::Text(s) => {
                    out.push(DTYPE_UTF8);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an NNPP container".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_owned();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry {name:?} extents overflow")))?;
            let entry = match dtype {
                DTYPE_F32 => {
                    let len = n
                        .checked_mul(4)
                        .ok_or_else(|| Error::Format(format!("entry {name:?} too large")))?;
                    let payload = r.take(len)?;
                    let data = payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Entry::Tensor(Tensor::new(shape, data)?)
                }
                DTYPE_UTF8 => {
                    if rank != 1 {
                        return Err(Error::Format(format!("text entry {name:?} has rank {rank}")));
                    }
                    let s = std::str::from_utf8(r.take(n)?)
                        .map_err(|_| Error::Format(format!("text entry {name:?} is not UTF-8")))?;
                    Entry::Text(s.to_owned())
                }
                d => return Err(Error::Format(format!("entry {name:?} has unknown dtype {d}"))),
            };
            c.insert(name, entry)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("container truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

const META: &str = "__meta__";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: ModelConfig,
    unit_norms: Vec<UnitNorm>,
}

/// Container holding every stored tensor of `model` plus its metadata.
pub fn checkpoint_container(model: &Model) -> Result<Container> {
    let mut c = Container::new();
    let meta = CheckpointMeta {
        config: model.config.clone(),
        unit_norms: model.unit_norms(),
    };
    c.insert_text(META, serde_json::to_string(&meta)?)?;
    for (name, t) in model.params().iter().chain(model.buffers()) {
        c.insert_tensor(name.clone(), t.clone())?;
    }
    Ok(c)
}

/// Rebuilds a model; the tensor names must match the described model exactly.
pub fn model_from_container(c: &Container) -> Result<Model> {
    let meta: CheckpointMeta =
        serde_json::from_str(c.text(META)?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut model = Model::new(meta.config)?;
    model.set_unit_norms(&meta.unit_norms)?;
    let mut expected: Vec<String> = model.params().keys().chain(model.buffers().keys()).cloned().collect();
    expected.sort();
    let stored: Vec<String> = c.names().filter(|n| *n != META).map(String::from).collect();
    if stored != expected {
        return Err(Error::Format(format!(
            "checkpoint tensors {stored:?} do not match the model's {expected:?}"
        )));
    }
    for name in &stored {
        model.set_tensor(name, c.tensor(name)?.clone()).map_err(|e| match e {
            Error::Shape(m) => Error::Format(m),
            other => other,
        })?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    checkpoint_container(model)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    model_from_container(&Container::load(path)?)
}
