//! Binary checkpoint container shared by every model kind.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EALMCKPT"
//! version    u32
//! kind       u32 length + UTF-8
//! metadata   u32 length + UTF-8 `key=value` lines, sorted by key
//! count      u32
//! tensor*    u32 name length + UTF-8 name
//!            u8 dtype tag (1 = f64, 2 = f32)
//!            u8 frozen flag
//!            u32 rank, then u64 per dimension
//!            raw values
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{EalmError, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"EALMCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pretrained,
    Entity,
    Fusion,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Pretrained => "pretrained",
            ModelKind::Entity => "entity",
            ModelKind::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(ModelKind::Pretrained),
            "entity" => Ok(ModelKind::Entity),
            "fusion" => Ok(ModelKind::Fusion),
            other => Err(EalmError::format(format!("unknown model kind {other:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind) -> Self {
        Checkpoint {
            kind,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_store(kind: ModelKind, store: &ParamStore) -> Self {
        let mut c = Checkpoint::new(kind);
        c.tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
                frozen: p.frozen,
            })
            .collect();
        c
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            let id = store.add(t.name.clone(), t.tensor.clone());
            store.set_frozen(id, t.frozen);
        }
        store
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| EalmError::format(format!("{} checkpoint lacks metadata {key:?}", self.kind)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| EalmError::format(format!("metadata {key}={raw:?} does not parse")))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(EalmError::contract(format!(
                "expected a {kind} checkpoint, got {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.kind.as_str());
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(DTYPE_F64);
            out.push(t.frozen as u8);
            out.extend_from_slice(&(t.tensor.ndim() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.tensor.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(EalmError::format("not a checkpoint: bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EalmError::format(format!("unsupported checkpoint version {version}")));
        }
        let kind = ModelKind::parse(&r.string()?)?;
        let mut meta = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EalmError::format(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let frozen = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = match dtype {
                DTYPE_F64 => r
                    .take(count * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(count * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(EalmError::format(format!("unknown dtype tag {other}"))),
            };
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(shape, data)?,
                frozen,
            });
        }
        if r.pos != bytes.len() {
            return Err(EalmError::format("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| EalmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EalmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| EalmError::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| EalmError::format("invalid UTF-8 in checkpoint"))
    }
}
