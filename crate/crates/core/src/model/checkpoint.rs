//! Versioned parameter container.
//!
//! Layout: magic `RPCK`, `u32` version, `u64` header length, a JSON header
//! (`meta` plus the name, shape, group and trainable flag of every tensor),
//! then each tensor's values as little-endian `f64` in header order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use autograd::Array;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Config echo and structural description.
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub mirror: Option<ParamStore>,
}

fn entries<'a>(group: &str, store: &'a ParamStore) -> impl Iterator<Item = (TensorEntry, &'a Array)> + 'a {
    let group = group.to_string();
    store.iter().map(move |(name, p)| {
        (TensorEntry { name: name.clone(), shape: p.value.shape().to_vec(), group: group.clone(), trainable: p.trainable }, &p.value)
    })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all: Vec<(TensorEntry, &Array)> = entries("params", &self.params).collect();
        if let Some(m) = &self.mirror {
            all.extend(entries("mirror", m));
        }
        let (tensors, values): (Vec<_>, Vec<_>) = all.into_iter().unzip();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors })?;
        let io = |e| Error::io(path, e);
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
            w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            for v in values {
                for x in v.iter() {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Loads a checkpoint; when `expected` is given, every key it holds must
    /// equal the stored meta's value for that key.
    pub fn load(path: &Path, expected: Option<&serde_json::Value>) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let mut hbuf = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut hbuf).map_err(io)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        if let Some(exp) = expected {
            check_meta(exp, &header.meta)?;
        }
        let mut params = ParamStore::new();
        let mut mirror: Option<ParamStore> = None;
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(io)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let value = Array::from_shape_vec(t.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let target = match t.group.as_str() {
                "params" => &mut params,
                "mirror" => mirror.get_or_insert_with(ParamStore::new),
                g => return Err(Error::Checkpoint(format!("unknown tensor group `{g}`"))),
            };
            target.insert(t.name.clone(), value);
            target.get_mut(&t.name).unwrap().trainable = t.trainable;
        }
        Ok(Self { meta: header.meta, params, mirror })
    }
}

fn check_meta(expected: &serde_json::Value, found: &serde_json::Value) -> Result<()> {
    let Some(obj) = expected.as_object() else {
        return if expected == found { Ok(()) } else { Err(Error::Checkpoint("checkpoint meta mismatch".into())) };
    };
    for (k, v) in obj {
        match found.get(k) {
            Some(f) if f == v => {}
            Some(f) => return Err(Error::Checkpoint(format!("config mismatch at `{k}`: checkpoint has {f}, expected {v}"))),
            None => return Err(Error::Checkpoint(format!("checkpoint lacks `{k}`"))),
        }
    }
    Ok(())
}
