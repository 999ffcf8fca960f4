//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"CBAMCKPT"`, `u32` version, `u64` + JSON header (model config and
//! metadata), `u64` tensor count, then per tensor `u32` + UTF-8 name,
//! `u32` rank, `u64` extents, and the raw `f64` values.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CBAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 1-based epoch the weights were taken after; 0 for an untrained model.
    pub epoch: usize,
    pub val_map50: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

pub fn to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.cfg.clone(),
        meta: meta.clone(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + header.len() + model.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} out of range")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = r.u64("header length")?;
    let header: Header =
        serde_json::from_slice(&r.bytes(len, "header")?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = Model::new(header.model, 0)?;
    let count = r.u64("tensor count")?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "holds {count} tensors but the configured model has {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("extent")).collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let param = model.params.get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, model expects {:?}",
                param.value.shape()
            )));
        }
        let raw = r.bytes(param.value.numel() * 8, &name)?;
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.params.iter().nth(i).expect("index in range").name;
        return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((model, header.meta))
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
