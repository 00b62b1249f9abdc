//! Checkpoint bundle: one safetensors file holding every parameter,
//! buffer and optimiser moment, with a JSON manifest in its metadata. The
//! manifest carries a digest of the tensor payload, checked on load.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "ctfgan.manifest";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub architecture_hash: String,
    pub config: RunConfig,
    pub phase: u8,
    pub phase_step: u64,
    pub global_step: u64,
    /// Opaque trainer state (RNG, sampler, monitor, optimiser counters).
    pub state: serde_json::Value,
    pub payload_sha256: String,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let values = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
    Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

fn payload_digest(entries: &BTreeMap<String, (Vec<usize>, Vec<u8>)>) -> String {
    let mut h = Sha256::new();
    for (name, (shape, bytes)) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Serialises `tensors` (stored as f32) with `manifest`; the payload
/// digest field is filled in here.
pub fn encode(tensors: &[(String, Tensor)], mut manifest: Manifest) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        if entries.insert(name.clone(), (t.dims().to_vec(), tensor_bytes(t)?)).is_some() {
            return Err(crate::error::contract(format!("duplicate checkpoint tensor {name}")));
        }
    }
    manifest.payload_sha256 = payload_digest(&entries);
    let views = entries
        .iter()
        .map(|(name, (shape, bytes))| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Integrity(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(
        MANIFEST_KEY.to_string(),
        serde_json::to_string(&manifest).expect("manifest serializes"),
    )]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Integrity(e.to_string()))
}

pub fn save(path: &Path, tensors: &[(String, Tensor)], manifest: Manifest) -> Result<()> {
    crate::io::write_atomic(path, &encode(tensors, manifest)?)
}

/// Parses and verifies a bundle.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, HashMap<String, Tensor>)> {
    let bad = |msg: String| Error::Integrity(msg);
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(format!("unreadable bundle: {e}")))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| bad("bundle has no manifest".into()))?;
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| bad(format!("malformed manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut entries = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!("tensor {name} is not f32")));
        }
        entries.insert(name, (view.shape().to_vec(), view.data().to_vec()));
    }
    if payload_digest(&entries) != manifest.payload_sha256 {
        return Err(bad("tensor payload does not match its digest".into()));
    }
    let mut tensors = HashMap::with_capacity(entries.len());
    for (name, (shape, bytes)) in entries {
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?);
    }
    Ok((manifest, tensors))
}

pub fn load(path: &Path) -> Result<(Manifest, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        let config = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\n").unwrap();
        Manifest {
            version: FORMAT_VERSION,
            config_hash: config.hash(),
            architecture_hash: config.architecture_hash(),
            config,
            phase: 1,
            phase_step: 3,
            global_step: 3,
            state: serde_json::json!({"k": 1}),
            payload_sha256: String::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::new(&[[1.0f32, f32::MIN_POSITIVE], [-0.0, 3.25e-7]], &Device::Cpu).unwrap();
        let bytes = encode(&[("a.w".into(), t.clone())], manifest()).unwrap();
        let (m, back) = decode(&bytes).unwrap();
        assert_eq!(m.phase_step, 3);
        let got = back["a.w"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let want = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let t = Tensor::new(&[1.0f32, 2.0, 3.0], &Device::Cpu).unwrap();
        let mut bytes = encode(&[("w".into(), t)], manifest()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Integrity(_))));
    }
}
