//! Binary checkpoint format.
//!
//! Layout: magic "DDSG", version u32, entry count u32, then an entry table
//! of (name length u32, name, dtype u8, rank u32, dims u32 each, payload
//! byte length u64), followed by the payloads in table order. All integers
//! and floats are little-endian. Dtype 1 = f32 tensor, 2 = raw bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DDSG";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_BYTES: u8 = 2;
/// Entry name holding the serialized model configuration.
const CONFIG_ENTRY: &str = "__config";

pub enum Entry {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { format: "checkpoint", detail: detail.into() }
}

pub fn save_entries(path: &Path, entries: &BTreeMap<String, Entry>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, e) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        match e {
            Entry::F32 { dims, data } => {
                out.write_all(&[DTYPE_F32])?;
                out.write_all(&(dims.len() as u32).to_le_bytes())?;
                for &d in dims {
                    out.write_all(&(d as u32).to_le_bytes())?;
                }
                out.write_all(&(data.len() as u64 * 4).to_le_bytes())?;
            }
            Entry::Bytes(b) => {
                out.write_all(&[DTYPE_BYTES])?;
                out.write_all(&0u32.to_le_bytes())?;
                out.write_all(&(b.len() as u64).to_le_bytes())?;
            }
        }
    }
    for e in entries.values() {
        match e {
            Entry::F32 { data, .. } => {
                for v in data {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            Entry::Bytes(b) => out.write_all(b)?,
        }
    }
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<BTreeMap<String, Entry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {}", version)));
    }
    let count = read_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 entry name"))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(|_| bad("truncated dtype"))?;
        let rank = read_u32(&mut r)? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated length"))?;
        let byte_len = u64::from_le_bytes(u64buf) as usize;
        table.push((name, dtype[0], dims, byte_len));
    }
    let mut entries = BTreeMap::new();
    for (name, dtype, dims, byte_len) in table {
        let mut payload = vec![0u8; byte_len];
        r.read_exact(&mut payload).map_err(|_| bad(format!("truncated payload for '{}'", name)))?;
        let entry = match dtype {
            DTYPE_F32 => {
                if byte_len % 4 != 0 {
                    return Err(bad(format!("f32 payload for '{}' not 4-byte aligned", name)));
                }
                let data: Vec<f32> =
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                let numel: usize = dims.iter().product();
                if numel != data.len() {
                    return Err(bad(format!("dims {:?} disagree with payload for '{}'", dims, name)));
                }
                Entry::F32 { dims, data }
            }
            DTYPE_BYTES => Entry::Bytes(payload),
            other => return Err(bad(format!("unknown dtype tag {}", other))),
        };
        if entries.insert(name.clone(), entry).is_some() {
            return Err(bad(format!("duplicate entry '{}'", name)));
        }
    }
    Ok(entries)
}

/// Serialize the model configuration and every parameter tensor.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut entries = BTreeMap::new();
    entries.insert(
        CONFIG_ENTRY.to_string(),
        Entry::Bytes(serde_json::to_vec(&model.cfg)?),
    );
    for p in model.params() {
        let v = p.value();
        let prev = entries.insert(
            p.name().to_string(),
            Entry::F32 { dims: v.shape().to_vec(), data: v.data().to_vec() },
        );
        if prev.is_some() {
            return Err(Error::Data(format!("duplicate parameter name '{}'", p.name())));
        }
    }
    save_entries(path, &entries)
}

/// Rebuild a model from a checkpoint; every parameter must be present with
/// a matching shape, and no unknown tensors may remain.
pub fn load_model(path: &Path) -> Result<Model> {
    let mut entries = load_entries(path)?;
    let cfg_bytes = match entries.remove(CONFIG_ENTRY) {
        Some(Entry::Bytes(b)) => b,
        _ => return Err(bad("missing config entry")),
    };
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    let model = Model::init(cfg, 0)?;
    for p in model.params() {
        match entries.remove(p.name()) {
            Some(Entry::F32 { dims, data }) => {
                if dims != p.shape() {
                    return Err(bad(format!(
                        "shape mismatch for '{}': stored {:?}, expected {:?}",
                        p.name(),
                        dims,
                        p.shape()
                    )));
                }
                *p.value_mut() = Tensor::new(dims, data)?;
            }
            Some(_) => return Err(bad(format!("entry '{}' is not a tensor", p.name()))),
            None => return Err(bad(format!("missing parameter '{}'", p.name()))),
        }
    }
    if let Some(extra) = entries.keys().next() {
        return Err(bad(format!("unknown entry '{}'", extra)));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn entry_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut entries = BTreeMap::new();
        entries.insert(
            "w".to_string(),
            Entry::F32 { dims: vec![2, 3], data: vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 3e8, -0.125] },
        );
        entries.insert("meta".to_string(), Entry::Bytes(b"{\"k\":1}".to_vec()));
        save_entries(&path, &entries).unwrap();
        let back = load_entries(&path).unwrap();
        assert_eq!(back.len(), 2);
        match &back["w"] {
            Entry::F32 { dims, data } => {
                assert_eq!(dims, &[2, 3]);
                match &entries["w"] {
                    Entry::F32 { data: orig, .. } => assert_eq!(data, orig),
                    _ => unreachable!(),
                }
            }
            _ => panic!("wrong dtype"),
        }
        match &back["meta"] {
            Entry::Bytes(b) => assert_eq!(b, b"{\"k\":1}"),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn model_round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::init(ModelConfig::tiny(4), 11).unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        let (pa, pb) = (model.params(), back.params());
        assert_eq!(pa.len(), pb.len());
        for (a, b) in pa.iter().zip(&pb) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value().data(), b.value().data(), "{}", a.name());
        }
        assert_eq!(model.cfg.classes, back.cfg.classes);
        assert_eq!(model.cfg.schedule, back.cfg.schedule);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_entries(&path).is_err());
        std::fs::write(&path, b"DDSG\x01\x00\x00\x00\x01\x00\x00\x00").unwrap(); // truncated table
        assert!(load_entries(&path).is_err());
    }
}
