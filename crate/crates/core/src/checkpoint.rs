//! Versioned binary parameter blobs plus a JSON manifest.
//!
//! Blob layout (little-endian): magic `IMTCKPT\0`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dims, `f64` values.

use std::fs;
use std::path::Path;

use imitate_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"IMTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: expected {CHECKPOINT_VERSION}, found {version}"
        )));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

/// Identity of a checkpoint and what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config_hash: String,
    pub params_hash: String,
    pub text_encoder_hash: String,
    pub code_version: String,
    pub num_params: usize,
    pub steps: usize,
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save(dir: &Path, stem: &str, store: &ParamStore, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, encode(store)).at(&bin)?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&json, text + "\n").at(&json)?;
    Ok(())
}

/// Loads `<stem>.bin`, checking it against `<stem>.json` and, when given,
/// against the config that is about to use it.
pub fn load(dir: &Path, stem: &str, cfg: Option<&RunConfig>) -> Result<(ParamStore, CheckpointManifest)> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).at(&json)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: json.clone(),
        msg: e.to_string(),
    })?;
    let bin = dir.join(format!("{stem}.bin"));
    let store = decode(&fs::read(&bin).at(&bin)?)?;
    let actual = store.hash();
    if actual != manifest.params_hash {
        return Err(Error::Checkpoint(format!(
            "parameter hash mismatch (expected {}, actual {actual})",
            manifest.params_hash
        )));
    }
    if let Some(cfg) = cfg {
        let h = cfg.hash();
        if h != manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch (checkpoint {}, config {h})",
                manifest.config_hash
            )));
        }
    }
    Ok((store, manifest))
}
