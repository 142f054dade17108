//! Binary parameter files: magic, JSON manifest, f32 payloads, CRC-64 trailer.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FLOWID01";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload section.
    pub offset: u64,
}

fn bad(tensor: &str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        message: message.into(),
    }
}

/// Serializes every value tensor in name order. Values are stored as f32.
pub fn checkpoint_bytes(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(store.num_values() * 4);
    for (name, p) in store.iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for &v in p.value.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(bad(name, format!("value {v} is not representable as a finite f32")));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(manifest.len()).map_err(|_| Error::format("manifest too large"))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + manifest.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn store_from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("bad magic: not a checkpoint file"));
    }
    let header = MAGIC.len() + 4;
    if bytes.len() < header + 8 {
        return Err(Error::format("checkpoint truncated before the manifest"));
    }
    let manifest_len = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().unwrap()) as usize;
    let payload_start = header + manifest_len;
    if bytes.len() < payload_start + 8 {
        return Err(Error::format("checkpoint truncated inside the manifest"));
    }
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[header..payload_start])
        .map_err(|e| Error::format(format!("bad manifest: {e}")))?;
    let body_end = bytes.len() - 8;
    let payload = &bytes[payload_start..body_end];

    let mut expected = 0u64;
    for e in &manifest {
        if e.dtype != "f32" {
            return Err(bad(&e.name, format!("unsupported dtype `{}`", e.dtype)));
        }
        if e.offset != expected {
            return Err(bad(&e.name, format!("offset {} where {expected} was expected", e.offset)));
        }
        let count: usize = e.shape.iter().product();
        expected += 4 * count as u64;
        if expected > payload.len() as u64 {
            return Err(bad(&e.name, format!("payload truncated: needs {expected} bytes, file has {}", payload.len())));
        }
    }
    if expected != payload.len() as u64 {
        return Err(Error::format(format!("{} trailing payload bytes", payload.len() as u64 - expected)));
    }
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let actual = CRC64.checksum(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::format(format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
    }

    let mut store = ParameterStore::new();
    for e in manifest {
        let start = e.offset as usize;
        let count: usize = e.shape.iter().product();
        let values = payload[start..start + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(e.shape.clone(), values).map_err(|err| bad(&e.name, err.to_string()))?;
        store.insert(e.name.clone(), tensor).map_err(|err| bad(&e.name, err.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    store_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn store() -> ParameterStore {
        let mut rng = Rng::new(9);
        let mut s = ParameterStore::new();
        s.insert("b.w", rng.uniform_tensor(&[3, 4], -1.0, 1.0)).unwrap();
        s.insert("a.bias", rng.uniform_tensor(&[4], -1.0, 1.0)).unwrap();
        s.insert("c.scalar", Tensor::vector(vec![0.5])).unwrap();
        s
    }

    #[test]
    fn layout() {
        let bytes = checkpoint_bytes(&store()).unwrap();
        assert_eq!(&bytes[..8], b"FLOWID01");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        let names: Vec<&str> = manifest.as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
        assert_eq!(names, ["a.bias", "b.w", "c.scalar"]);
        assert_eq!(manifest[1]["offset"], 16);
        assert_eq!(manifest[2]["offset"], 64);
        assert_eq!(manifest[1]["shape"], serde_json::json!([3, 4]));
        assert_eq!(bytes.len(), 12 + len + 4 * 17 + 8);
        let body = &bytes[..bytes.len() - 8];
        let crc = CRC64.checksum(body);
        assert_eq!(&bytes[bytes.len() - 8..], crc.to_le_bytes());
        assert_eq!(CRC64.checksum(b"123456789"), 0x995d_c9bb_df19_39fa);
    }

    #[test]
    fn round_trip_is_canonical() {
        let mut s = store();
        let first = checkpoint_bytes(&s).unwrap();
        let loaded = store_from_bytes(&first).unwrap();
        assert_eq!(checkpoint_bytes(&loaded).unwrap(), first);
        s.round_to_f32();
        for (name, p) in s.iter() {
            assert_eq!(p.value, loaded.value(name).unwrap().clone());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint_bytes(&store()).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for pos in [12 + len, 12 + len + 30, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(store_from_bytes(&bad), Err(Error::Format(m)) if m.contains("checksum")));
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(store_from_bytes(&magic), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = checkpoint_bytes(&store()).unwrap();
        let mut cut = bytes[..bytes.len() - 8 - 4].to_vec();
        cut.extend_from_slice(&[0; 8]);
        match store_from_bytes(&cut) {
            Err(Error::Checkpoint { tensor, .. }) => assert_eq!(tensor, "c.scalar"),
            other => panic!("{other:?}"),
        }
        assert!(store_from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(checkpoint_bytes(&s), Err(Error::Checkpoint { tensor, .. }) if tensor == "x"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&store(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io(_))));
    }
}
