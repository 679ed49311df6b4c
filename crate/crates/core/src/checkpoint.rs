//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `ITVM`, `u32` version, `u64` length of the
//! run-config JSON and its bytes, `u64` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, `u32` rank, `u64` dims and `f64` data.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::IterNet;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ITVM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(config: &RunConfig, store: &ParamStore) -> Vec<u8> {
    let json = config.to_json();
    let mut out = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Writes to a temporary sibling file and renames it over `path`, so an
/// interrupted save never leaves a truncated checkpoint behind.
pub fn save(path: &Path, config: &RunConfig, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(config, store))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::format(self.path, format!("{what} {n} too large")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let json_len = r.len("config length")?;
    let json = std::str::from_utf8(r.take(json_len, "config")?)
        .map_err(|_| Error::format(path, "config is not UTF-8"))?;
    let config = RunConfig::from_json(json).map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let count = r.len("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("tensor dim")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(path, format!("tensor {name:?} is too large")))?;
        let raw = r.take(n * 8, &format!("tensor {name:?}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor table"));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rebuilds the model described by the checkpoint and installs its weights.
/// Any mismatch between the tensor table and the model is a format error;
/// nothing is returned unless every parameter loaded.
pub fn load_model(path: &Path) -> Result<(RunConfig, IterNet)> {
    let ckpt = load(path)?;
    let model = restore(&ckpt, path)?;
    Ok((ckpt.config, model))
}

pub fn restore(ckpt: &Checkpoint, path: &Path) -> Result<IterNet> {
    let mut model = IterNet::new(&ckpt.config.model, 0)?;
    let mut seen = vec![false; model.store.len()];
    for (name, t) in &ckpt.tensors {
        let id = model
            .store
            .id(name)
            .ok_or_else(|| Error::format(path, format!("tensor {name:?} does not exist in the model")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::format(path, format!("tensor {name:?} appears twice")));
        }
        model
            .store
            .set_value(name, t.clone())
            .map_err(|e| Error::format(path, format!("tensor {name:?}: {e}")))?;
    }
    if let Some(missing) = model.store.iter().find(|(id, _)| !seen[id.index()]) {
        return Err(Error::format(path, format!("tensor {:?} missing from checkpoint", missing.1.name)));
    }
    Ok(model)
}
