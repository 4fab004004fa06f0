//! `RCSG1` checkpoint archive: magic bytes, little-endian u64 header length,
//! JSON header, then the concatenated little-endian f32 payloads of the
//! named tensors listed in the header index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::params::{TensorData, TensorMap};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RCSG1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    component: String,
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

/// In-memory archive contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub component: String,
    pub meta: serde_json::Value,
    pub tensors: TensorMap,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, td) in &self.tensors {
            let expected: usize = td.shape.iter().product();
            if expected != td.data.len() {
                return Err(Error::shape(format!(
                    "tensor {name}: shape {:?} does not hold {} values",
                    td.shape,
                    td.data.len()
                )));
            }
            index.push(IndexEntry {
                name: name.clone(),
                shape: td.shape.clone(),
                offset,
                len: td.data.len() as u64,
            });
            offset += td.data.len() as u64 * 4;
        }
        let header = serde_json::to_vec(&Header {
            component: self.component.clone(),
            meta: self.meta.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for td in self.tensors.values() {
            for v in &td.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing RCSG1 magic"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let hstart = MAGIC.len() + 8;
        let data_start = hstart
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[hstart..data_start])?;
        let payload = &bytes[data_start..];
        let mut tensors = TensorMap::new();
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize * 4;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len as usize {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name, TensorData { shape: e.shape, data });
        }
        Ok(Archive {
            component: header.component,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes via a temporary sibling and rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Reads and checks the component tag.
    pub fn read_component(path: &Path, component: &str) -> Result<Self> {
        let a = Self::read(path)?;
        if a.component != component {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} holds a {} checkpoint, expected {component}",
                path.display(),
                a.component
            )));
        }
        Ok(a)
    }
}

fn prefixed<'a>(prefix: &str, map: &'a TensorMap) -> impl Iterator<Item = (String, TensorData)> + 'a {
    let prefix = prefix.to_string();
    map.iter().map(move |(k, v)| (format!("{prefix}{k}"), v.clone()))
}

fn split_prefixed(map: &TensorMap, prefix: &str) -> TensorMap {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ArchiveMeta<M> {
    meta: M,
    optimizer_step: u64,
}

/// Archive holding best parameters, resume parameters and Adam moments.
pub fn pack_training_archive<M: Serialize>(
    component: &str,
    meta: &M,
    params: &TensorMap,
    current: &TensorMap,
    optimizer: &AdamState,
) -> Result<Archive> {
    let mut tensors = TensorMap::new();
    tensors.extend(prefixed("params/", params));
    tensors.extend(prefixed("current/", current));
    tensors.extend(prefixed("adam_m/", &optimizer.m));
    tensors.extend(prefixed("adam_v/", &optimizer.v));
    Ok(Archive {
        component: component.to_string(),
        meta: serde_json::to_value(ArchiveMeta { meta, optimizer_step: optimizer.step })?,
        tensors,
    })
}

pub fn unpack_training_archive<M: for<'de> Deserialize<'de>>(
    a: &Archive,
) -> Result<(M, TensorMap, TensorMap, AdamState)> {
    let am: ArchiveMeta<M> = serde_json::from_value(a.meta.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("bad checkpoint header: {e}")))?;
    Ok((
        am.meta,
        split_prefixed(&a.tensors, "params/"),
        split_prefixed(&a.tensors, "current/"),
        AdamState {
            step: am.optimizer_step,
            m: split_prefixed(&a.tensors, "adam_m/"),
            v: split_prefixed(&a.tensors, "adam_v/"),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut tensors = TensorMap::new();
        tensors.insert(
            "a.weight".into(),
            TensorData { shape: vec![2, 3], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25] },
        );
        tensors.insert("b".into(), TensorData { shape: vec![1], data: vec![0.1] });
        Archive {
            component: "diffusion".into(),
            meta: serde_json::json!({"epoch": 3, "best": 0.123456789012345678}),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"RCSG1");
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(b.meta, a.meta);
        assert!(crate::nn::tensor_maps_bit_eq(&a.tensors, &b.tensors));
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_and_component_rejected() {
        assert!(matches!(Archive::from_bytes(b"RCSG0xxxxxxxx"), Err(Error::IncompatibleCheckpoint(_))));
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.rcsg");
        sample().write(&p).unwrap();
        assert!(Archive::read_component(&p, "diffusion").is_ok());
        assert!(matches!(Archive::read_component(&p, "segmentation"), Err(Error::IncompatibleCheckpoint(_))));
    }
}
