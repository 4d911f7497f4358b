//! Model checkpoints.
//!
//! Layout: `"HQCK"`, a version byte, a `u32` header length, a JSON header
//! (config, parameter names and shapes, frozen CDF tables, optimizer
//! metadata, parameter hash), then every parameter as little-endian `f64`,
//! followed by the Adam moments when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{FrozenTables, HquicModel};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::params::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HQCK";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    lr: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    format_version: u8,
    crate_version: String,
    config: Config,
    step: u64,
    param_hash: String,
    params: Vec<ParamEntry>,
    tables: Option<FrozenTables>,
    optimizer: Option<OptimizerEntry>,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: HquicModel,
    pub optimizer: Option<Adam>,
    pub step: u64,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes via a sibling temp file and rename, so readers never see a
/// partial checkpoint.
pub fn save(path: impl AsRef<Path>, model: &HquicModel, optimizer: Option<&Adam>, step: u64) -> Result<()> {
    let path = path.as_ref();
    let header = HeaderJson {
        format_version: VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: model.config().clone(),
        step,
        param_hash: model.param_hash_hex(),
        params: model
            .store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        tables: model.tables().ok().cloned(),
        optimizer: optimizer.map(|o| OptimizerEntry {
            lr: o.lr,
            step: o.steps_taken(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(json.len() + 8 * 3 * model.store.num_scalars() + 16);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in model.store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(o) = optimizer {
        let (m, v) = o.moments();
        for part in m.iter().chain(v) {
            for x in part {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    write_atomic(path, &buf)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "not an HQCK checkpoint"));
    }
    if bytes[4] != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {}, this build reads {VERSION}",
            bytes[4]
        )));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = bytes
        .get(9..9 + hlen)
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: HeaderJson = serde_json::from_slice(body).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let mut blob = &bytes[9 + hlen..];
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        if blob.len() < 8 * n {
            return Err(format_err(path, "truncated parameter data"));
        }
        let (head, rest) = blob.split_at(8 * n);
        blob = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n = p.shape.iter().product();
        params.push((p.name.clone(), Tensor::new(&p.shape, read_f64s(n)?)));
    }
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
    let moments = match &header.optimizer {
        Some(_) => {
            let mut m = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                m.push(read_f64s(n)?);
            }
            let mut v = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                v.push(read_f64s(n)?);
            }
            Some((m, v))
        }
        None => None,
    };
    if !blob.is_empty() {
        return Err(format_err(path, "trailing bytes after parameter data"));
    }
    let tables = header.tables.map(FrozenTables::validated).transpose()?;
    let model = HquicModel::from_parts(&header.config, params, tables)?;
    if model.param_hash_hex() != header.param_hash {
        return Err(format_err(path, "parameter hash does not match contents"));
    }
    let optimizer = match (header.optimizer, moments) {
        (Some(o), Some((m, v))) => Some(
            Adam::from_state(&model.store, o.lr, o.step, m, v)
                .ok_or_else(|| format_err(path, "optimizer state does not match parameters"))?,
        ),
        _ => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> HquicModel {
        let mut c = Config::default();
        c.model.n = 4;
        c.model.m = 4;
        c.fbwt.heads = 2;
        HquicModel::new(&c, 5).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.hqck");
        let mut model = tiny_model();
        model.freeze();
        let mut adam = Adam::new(&model.store, 0.01);
        let grads: Vec<_> = model.store.iter().map(|(_, t)| Some(t.map(|x| x + 0.1))).collect();
        adam.update(&mut model.store, &grads);
        model.freeze();
        save(&p, &model, Some(&adam), 17).unwrap();
        let ck = load(&p).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.model.param_hash(), model.param_hash());
        assert_eq!(ck.model.tables().unwrap(), model.tables().unwrap());
        let o = ck.optimizer.unwrap();
        assert_eq!(o.steps_taken(), 1);
        assert_eq!(o.moments().0, adam.moments().0);
        assert_eq!(o.moments().1, adam.moments().1);
        assert!(!dir
            .path()
            .read_dir()
            .unwrap()
            .any(|e| e.unwrap().file_name().to_string_lossy().contains(".tmp")));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.hqck");
        let model = tiny_model();
        save(&p, &model, None, 0).unwrap();
        let bytes = fs::read(&p).unwrap();

        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));
        assert!(matches!(load(dir.path().join("absent")), Err(Error::NotFound(_))));
    }
}
