//! Binary checkpoints: the 8-byte magic `AUREGV01`, a little-endian `u64`
//! manifest length, a JSON manifest (metadata plus tensor name, shape and
//! byte offset), then every tensor's values as raw little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use auregress_core::nn::ParamStore;
use auregress_core::params::ParamSpaceConfig;
use auregress_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"AUREGV01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Segmenter,
    Identity,
    Generator,
    Regressor,
}

impl ModelKind {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Segmenter => "segmenter.ckpt",
            Self::Identity => "identity.ckpt",
            Self::Generator => "generator.ckpt",
            Self::Regressor => "regressor.ckpt",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Segmenter => "feature extractor",
            Self::Identity => "identity embedder",
            Self::Generator => "generator",
            Self::Regressor => "regressor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: ModelKind,
    /// Fingerprint of the stage that produced the checkpoint.
    pub fingerprint: String,
    /// Fingerprints of the checkpoints and data this one was built from.
    pub upstream: BTreeMap<String, String>,
    pub space: ParamSpaceConfig,
    pub frozen: bool,
    /// Architecture settings needed to rebuild the model.
    #[serde(default)]
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

pub fn encode(meta: &Meta, store: &ParamStore) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        meta: meta.clone(),
        tensors,
    })
    .expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(AppError::format(path, "not an AUREGV01 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(AppError::format(path, "truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| AppError::format(path, e))?;
    Ok((manifest, &body[len..]))
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Meta, Vec<(String, Tensor)>)> {
    let (manifest, data) = split_header(path, bytes)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let len: usize = e.shape.iter().product();
        let start = usize::try_from(e.offset).map_err(|_| AppError::format(path, "offset overflow"))?;
        let end = start
            .checked_add(8 * len)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| AppError::format(path, format!("tensor {} runs past the end of the file", e.name)))?;
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, values).map_err(|err| AppError::format(path, err))?;
        tensors.push((e.name, t));
    }
    Ok((manifest.meta, tensors))
}

pub fn save(path: &Path, meta: &Meta, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(meta, store))
}

pub fn load(path: &Path) -> Result<(Meta, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(path, &bytes)
}

/// Reads only the metadata, without the tensor payload.
pub fn read_meta(path: &Path) -> Result<Meta> {
    let mut f = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|e| AppError::io(path, e))?;
    if &head[..8] != MAGIC {
        return Err(AppError::format(path, "not an AUREGV01 checkpoint"));
    }
    let len = u64::from_le_bytes(head[8..].try_into().expect("8 bytes")) as usize;
    let mut manifest = vec![0u8; len];
    f.read_exact(&mut manifest).map_err(|e| AppError::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest).map_err(|e| AppError::format(path, e))?;
    Ok(manifest.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> Meta {
        Meta {
            kind: ModelKind::Generator,
            fingerprint: "abc".into(),
            upstream: BTreeMap::from([("data".to_string(), "0123".to_string())]),
            space: ParamSpaceConfig::desk(),
            frozen: true,
            detail: serde_json::json!({ "k": 1 }),
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5),
                                     seed in any::<u64>()) {
            let mut store = ParamStore::new();
            let mut x = seed;
            for (i, shape) in shapes.iter().enumerate() {
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); f64::from_bits(x >> 2) }).collect();
                store.add(&format!("t{i}"), Tensor::new(shape, data).unwrap());
            }
            let bytes = encode(&meta(), &store);
            let (m, tensors) = decode(Path::new("mem"), &bytes).unwrap();
            prop_assert_eq!(m, meta());
            prop_assert_eq!(tensors.len(), store.len());
            for ((name, t), (n2, t2)) in store.iter().zip(&tensors) {
                prop_assert_eq!(name, n2.as_str());
                prop_assert_eq!(t.shape(), t2.shape());
                prop_assert!(t.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn layout_starts_with_magic_and_ends_with_raw_values() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let bytes = encode(&meta(), &store);
        assert_eq!(&bytes[..8], b"AUREGV01");
        let tail = &bytes[bytes.len() - 16..];
        assert_eq!(&tail[..8], &1.5f64.to_le_bytes());
        assert_eq!(&tail[8..], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[4], vec![0.0; 4]).unwrap());
        let bytes = encode(&meta(), &store);
        assert!(decode(Path::new("x"), b"AUREGV02........").is_err());
        assert!(decode(Path::new("x"), &bytes[..bytes.len() - 1]).is_err());
        assert!(decode(Path::new("x"), &bytes[..20]).is_err());
    }

    #[test]
    fn metadata_reads_without_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        save(&path, &meta(), &store).unwrap();
        assert_eq!(read_meta(&path).unwrap(), meta());
    }
}
