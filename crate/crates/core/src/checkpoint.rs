//! Binary checkpoint format.
//!
//! ```text
//! offset 0   magic        b"MSRG"
//! offset 4   version      u32 little-endian (currently 1)
//! offset 8   header_len   u64 little-endian
//! offset 16  header       header_len bytes of UTF-8 JSON
//! then       payload      little-endian f32 data
//! ```
//!
//! The header is a JSON object. The reserved key `__metadata__` holds the
//! [`ModelMeta`]; every other key is a tensor name, in map order, mapping to
//! `{"dtype": "f32", "shape": [...], "offset": o, "length": n}` where `offset`
//! and `length` are byte counts relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CheckpointError, Error, Result};
use crate::params::{ModelMeta, ParameterMap};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MSRG";
pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";
const PREAMBLE: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Serializes a map into the checkpoint byte layout.
pub fn to_bytes(map: &ParameterMap) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert(
        METADATA_KEY.into(),
        serde_json::to_value(&map.meta).map_err(|e| CheckpointError::Header(e.to_string()))?,
    );
    let mut offset = 0u64;
    for (name, t) in map.iter() {
        if name == METADATA_KEY {
            return Err(Error::Usage(format!(
                "{METADATA_KEY} is a reserved tensor name"
            )));
        }
        let length = (t.len() * 4) as u64;
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length,
        };
        header.insert(
            name.to_string(),
            serde_json::to_value(entry).map_err(|e| CheckpointError::Header(e.to_string()))?,
        );
        offset += length;
    }
    let header = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in map.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<ParameterMap> {
    if bytes.len() < PREAMBLE {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        if found != MAGIC {
            return Err(CheckpointError::BadMagic { found }.into());
        }
        return Err(CheckpointError::Header(format!("file is only {} bytes", bytes.len())).into());
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("slice of 4");
    if found != MAGIC {
        return Err(CheckpointError::BadMagic { found }.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice of 4"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("slice of 8"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            CheckpointError::Header(format!("header length {header_len} exceeds file size"))
        })? as usize;

    let header: Map<String, Value> = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut meta = ModelMeta::default();
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            meta = serde_json::from_value(value)
                .map_err(|e| CheckpointError::Header(format!("metadata: {e}")))?;
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| CheckpointError::Header(format!("{name}: {e}")))?;
        if entry.dtype != "f32" {
            return Err(CheckpointError::Header(format!(
                "{name}: unsupported dtype {}",
                entry.dtype
            ))
            .into());
        }
        let expected = entry
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| {
                CheckpointError::Header(format!("{name}: shape {:?} overflows", entry.shape))
            })?;
        if expected != entry.length {
            return Err(CheckpointError::Inconsistent {
                name,
                shape: entry.shape,
                expected,
                declared: entry.length,
            }
            .into());
        }
        entries.push((name, entry));
    }

    let mut by_offset: Vec<usize> = (0..entries.len()).collect();
    by_offset.sort_by_key(|&i| (entries[i].1.offset, entries[i].1.length));
    for pair in by_offset.windows(2) {
        let (a, b) = (&entries[pair[0]], &entries[pair[1]]);
        if a.1.length > 0 && b.1.length > 0 && a.1.offset + a.1.length > b.1.offset {
            return Err(CheckpointError::Overlap {
                first: a.0.clone(),
                second: b.0.clone(),
            }
            .into());
        }
    }

    let mut map = ParameterMap::new(meta);
    for (name, entry) in entries {
        let end = entry.offset.saturating_add(entry.length);
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated {
                name,
                end,
                len: payload.len() as u64,
            }
            .into());
        }
        let raw = &payload[entry.offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let tensor = Tensor::new(entry.shape, data)?;
        map.insert(name, tensor)?;
    }
    Ok(map)
}

pub fn save(map: &ParameterMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterMap {
        let mut m = ParameterMap::new(ModelMeta {
            kind: "encoder".into(),
            feature_dim: 2,
            layers: 1,
        });
        m.insert(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap(),
        )
        .unwrap();
        m.insert("b", Tensor::new(vec![2], vec![-0.0, 7.0]).unwrap())
            .unwrap();
        m
    }

    /// Rewrites the JSON header of a valid file and fixes up the length field.
    fn with_header(bytes: &[u8], edit: impl FnOnce(&mut Map<String, Value>)) -> Vec<u8> {
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Map<String, Value> = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        edit(&mut header);
        let new_header = serde_json::to_vec(&Value::Object(header)).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + hlen..]);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["w", "b"]);
    }

    #[test]
    fn layout_prefix() {
        let bytes = to_bytes(&sample()).unwrap();
        assert_eq!(&bytes[0..4], b"MSRG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + hlen + 6 * 4);
        let first = f32::from_le_bytes(bytes[16 + hlen..20 + hlen].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn empty_map_is_valid() {
        let m = ParameterMap::new(ModelMeta::default());
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.msrg"), dir.path().join("b.msrg"));
        save(&sample(), &a).unwrap();
        save(&sample(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(load(&a).unwrap().bit_eq(&sample()));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        let err = from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::BadMagic { found }) if &found == b"XXXX")
        );
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Version {
                found: 7,
                expected: 1
            }))
        ));
    }

    #[test]
    fn shape_length_disagreement() {
        let bytes = with_header(&to_bytes(&sample()).unwrap(), |h| {
            h["w"]["shape"] = serde_json::json!([3, 2]);
        });
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Inconsistent { .. }))
        ));
    }

    #[test]
    fn overlapping_offsets() {
        let bytes = with_header(&to_bytes(&sample()).unwrap(), |h| {
            h["b"]["offset"] = serde_json::json!(8);
        });
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Overlap { .. }))
        ));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
    }

    #[test]
    fn metadata_comes_back() {
        let back = from_bytes(&to_bytes(&sample()).unwrap()).unwrap();
        assert_eq!(back.meta.kind, "encoder");
        assert_eq!(back.meta.feature_dim, 2);
        assert_eq!(back.meta.layers, 1);
    }
}
