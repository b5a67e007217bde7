//! Binary model snapshots: a tagged JSON header plus raw f32 parameters.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, the
//! JSON header, then every parameter group as little-endian f32 in group
//! order. Parameters are held as f64 in memory but drawn from f32 values at
//! init, so a fresh model survives the narrowing bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ModelParams, TrainConfig};

const MAGIC: &[u8; 8] = b"EALIGNCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GroupMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    crate_version: String,
    config: TrainConfig,
    groups: Vec<GroupMeta>,
}

pub fn to_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let groups = model.groups();
    let header = Header {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: model.config.clone(),
        groups: groups
            .iter()
            .map(|(name, t)| GroupMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let payload_len: usize = groups.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &groups {
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 8 + 4 + 8 {
        return Err(fail("truncated before header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail("header version disagrees with container"));
    }
    header.config.validate()?;

    let mut model = ModelParams::zeros(&header.config);
    let mut payload = &body[header_len..];
    {
        let mut groups = model.groups_mut();
        if groups.len() != header.groups.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter groups, header lists {}",
                groups.len(),
                header.groups.len()
            )));
        }
        for ((name, tensor), meta) in groups.iter_mut().zip(&header.groups) {
            if *name != meta.name || tensor.shape() != meta.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "group mismatch: expected {name} {:?}, header has {} {:?}",
                    tensor.shape(),
                    meta.name,
                    meta.shape
                )));
            }
            let want = tensor.numel() * 4;
            if payload.len() < want {
                return Err(fail("truncated payload"));
            }
            for (dst, chunk) in tensor.data_mut().iter_mut().zip(payload[..want].chunks(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            payload = &payload[want..];
        }
    }
    if !payload.is_empty() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(model)
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelParams {
        let cfg = TrainConfig {
            dim: 4,
            rel_layers: 2,
            ent_layers: 2,
            rng_seed: 7,
            ..TrainConfig::default()
        };
        ModelParams::init(&cfg).unwrap()
    }

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        let model = small_model();
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for ((n1, a), (n2, b)) in model.groups().iter().zip(back.groups().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "group {n1}");
            }
        }
        assert_eq!(model.checksum(), back.checksum());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let model = small_model();
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(model.checksum(), back.checksum());
    }

    #[test]
    fn second_serialization_is_stable() {
        let model = small_model();
        let a = to_bytes(&model).unwrap();
        let b = to_bytes(&from_bytes(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let model = small_model();
        let bytes = to_bytes(&model).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(matches!(from_bytes(&bad_magic), Err(Error::Checkpoint(_))));

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(matches!(from_bytes(&bad_version), Err(Error::Checkpoint(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(truncated), Err(Error::Checkpoint(_))));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(from_bytes(&trailing), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_group_shape_mismatch() {
        let model = small_model();
        let bytes = to_bytes(&model).unwrap();
        // Grow the declared dim so group shapes stop matching the payload.
        let other_cfg = TrainConfig {
            dim: 8,
            ..model.config.clone()
        };
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
        header.config = other_cfg;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(&bytes[..12]);
        forged.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        forged.extend_from_slice(&new_header);
        forged.extend_from_slice(&bytes[20 + header_len..]);
        assert!(matches!(from_bytes(&forged), Err(Error::Checkpoint(_))));
    }
}
