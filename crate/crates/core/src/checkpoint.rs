//! Versioned binary checkpoints: string metadata plus named f64 tensors.
//!
//! Layout (little-endian): `b"PMCK"`, u32 version, u32 metadata count, then
//! per entry u32-length-prefixed key and value; u32 tensor count, then per
//! tensor a u32-length-prefixed name, u32 rank, u64 dims, and the f64 data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Module, OptimizerState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata entry {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("malformed metadata entry {key}")))
    }

    pub fn insert_module(&mut self, prefix: &str, module: &impl Module) {
        for (name, t) in module.named_params() {
            self.tensors
                .insert(format!("{prefix}/{name}"), (t.shape().to_vec(), t.to_vec()));
        }
    }

    /// Overwrites every parameter of `module` from the entries under
    /// `prefix`, keeping each parameter's trainability.
    pub fn load_module(&self, prefix: &str, module: &mut impl Module) -> Result<()> {
        for (name, t) in module.named_params_mut() {
            let key = format!("{prefix}/{name}");
            let (shape, data) = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            *t = if t.requires_grad() {
                Tensor::param(data.clone(), shape)
            } else {
                Tensor::new(data.clone(), shape)
            };
        }
        Ok(())
    }

    pub fn insert_optimizer(&mut self, prefix: &str, state: &OptimizerState) {
        for (k, v) in state {
            self.tensors.insert(format!("{prefix}/{k}"), (vec![v.len()], v.clone()));
        }
    }

    pub fn optimizer_state(&self, prefix: &str) -> OptimizerState {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, (_, v))| k.strip_prefix(&p).map(|name| (name.to_string(), v.clone())))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    /// Writes through a temporary file and a rename, so a crash never
    /// leaves a truncated checkpoint behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
