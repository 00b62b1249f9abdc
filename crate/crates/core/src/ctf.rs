//! Conditional transferring features.
//!
//! For block `m` of the transfer generator, the feature is the stack of
//! DCT-domain difference maps `H_m` followed by `E` spatially constant
//! channels holding an embedding of the block's second conditional-norm
//! rows (scale and shift of the conditioning class) concatenated with the
//! one-hot low-quality label.

use candle_core::{Tensor, Var};

use crate::cbn::CbnParams;
use crate::error::{contract, Error, Result};
use crate::nn::{Init, Kind, Registry};
use crate::spectral::{tensor as spectral, Resolution};

/// Trainable `(input_dim, output_dim)` projection used as `Embed`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub weights: Var,
}

impl EmbeddingTable {
    pub fn new(reg: &mut Registry, init: &mut Init, name: &str, input_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(contract("embedding table dimensions must be positive"));
        }
        let std = (1.0 / input_dim as f64).sqrt();
        let w = init.normal(&[input_dim, output_dim], std)?;
        Ok(EmbeddingTable {
            weights: reg.add(&format!("{name}.weights"), w, Kind::Trainable)?,
        })
    }

    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(contract("embedding weights must be a matrix"));
        }
        Ok(EmbeddingTable {
            weights: Var::from_tensor(&weights)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.dims()[1]
    }
}

/// One assembled feature for a batch: `(b, t + e, h, w)`.
#[derive(Debug, Clone)]
pub struct CtfTensor {
    pub tensor: Tensor,
    pub block_index: usize,
    pub difference_channels: usize,
    pub embed_channels: usize,
    pub source_classes: Vec<usize>,
    pub source_lq_labels: Vec<usize>,
}

impl CtfTensor {
    pub fn resolution(&self) -> Result<Resolution> {
        let (_, _, h, w) = self.tensor.dims4()?;
        Ok(Resolution::new(h, w))
    }

    pub fn channels(&self) -> usize {
        self.difference_channels + self.embed_channels
    }

    /// Same layout with every value zeroed; the ablation input.
    pub fn zeroed(&self) -> Result<CtfTensor> {
        Ok(CtfTensor {
            tensor: self.tensor.zeros_like()?,
            ..self.clone()
        })
    }
}

const CTF_MANIFEST_KEY: &str = "ctfgan.ctfs";

/// Shape manifest entry of one serialised feature.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CtfRecord {
    pub name: String,
    pub block_index: usize,
    pub shape: Vec<usize>,
    pub difference_channels: usize,
    pub embed_channels: usize,
    pub classes: Vec<usize>,
    pub lq_labels: Vec<usize>,
}

/// Serialises features as a safetensors file (`ctf1`, `ctf2`, ...) whose
/// metadata lists every tensor's shape and provenance.
pub fn encode_ctfs(ctfs: &[CtfTensor]) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(ctfs.len());
    let mut payloads = Vec::with_capacity(ctfs.len());
    for ctf in ctfs {
        let values = ctf.tensor.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        payloads.push(values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>());
        records.push(CtfRecord {
            name: format!("ctf{}", ctf.block_index),
            block_index: ctf.block_index,
            shape: ctf.tensor.dims().to_vec(),
            difference_channels: ctf.difference_channels,
            embed_channels: ctf.embed_channels,
            classes: ctf.source_classes.clone(),
            lq_labels: ctf.source_lq_labels.clone(),
        });
    }
    let views = records
        .iter()
        .zip(&payloads)
        .map(|(r, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, r.shape.clone(), bytes)
                .map(|v| (r.name.clone(), v))
                .map_err(|e| Error::Integrity(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = std::collections::HashMap::from([(
        CTF_MANIFEST_KEY.to_string(),
        serde_json::to_string(&records).expect("records serialize"),
    )]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Integrity(e.to_string()))
}

/// Reads back a file written by [`encode_ctfs`].
pub fn decode_ctfs(bytes: &[u8]) -> Result<Vec<CtfTensor>> {
    let bad = |m: String| Error::Integrity(m);
    let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CTF_MANIFEST_KEY))
        .ok_or_else(|| bad("feature file has no manifest".into()))?;
    let records: Vec<CtfRecord> = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    records
        .into_iter()
        .map(|r| {
            let view = st.tensor(&r.name).map_err(|e| bad(e.to_string()))?;
            if view.shape() != r.shape.as_slice() {
                return Err(bad(format!("{} does not have its manifest shape", r.name)));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(CtfTensor {
                tensor: Tensor::from_vec(values, r.shape, &candle_core::Device::Cpu)?,
                block_index: r.block_index,
                difference_channels: r.difference_channels,
                embed_channels: r.embed_channels,
                source_classes: r.classes,
                source_lq_labels: r.lq_labels,
            })
        })
        .collect()
}

/// One-hot `(n, classes)` encoding of low-quality labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelDomain {
            label,
            size: classes,
            space: "low-quality",
        });
    }
    let mut v = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), &candle_core::Device::Cpu)?)
}

/// `Embed(Concat(gamma_c, beta_c, onehot(g_L)))` for a batch: every input
/// is `(n, _)`, the result `(n, E)`.
pub fn embed_labels(gamma: &Tensor, beta: &Tensor, lq_one_hot: &Tensor, table: &EmbeddingTable) -> Result<Tensor> {
    let joined = Tensor::cat(&[gamma, beta, lq_one_hot], 1)?;
    let dim = joined.dim(1)?;
    if dim != table.input_dim() {
        return Err(contract(format!(
            "embedding input has {dim} entries, table expects {}",
            table.input_dim()
        )));
    }
    let w = table.weights.as_tensor().to_dtype(joined.dtype())?;
    Ok(joined.matmul(&w)?)
}

/// Concatenates `(b, t, h, w)` difference maps with the `(b, e)`
/// embedding broadcast to constant maps.
pub fn assemble_ctf(
    differences: &Tensor,
    embedding: &Tensor,
    block_index: usize,
    source_classes: Vec<usize>,
    source_lq_labels: Vec<usize>,
) -> Result<CtfTensor> {
    let (b, t, h, w) = differences.dims4()?;
    let (eb, e) = embedding.dims2()?;
    if eb != b {
        return Err(contract(format!("embedding batch {eb} differs from difference batch {b}")));
    }
    if e == 0 {
        return Err(contract("embedding must have at least one channel"));
    }
    let broadcast = embedding
        .reshape((b, e, 1, 1))?
        .broadcast_as((b, e, h, w))?
        .contiguous()?;
    let tensor = Tensor::cat(&[differences, &broadcast.to_dtype(differences.dtype())?], 1)?;
    Ok(CtfTensor {
        tensor,
        block_index,
        difference_channels: t,
        embed_channels: e,
        source_classes,
        source_lq_labels,
    })
}

/// Everything the transfer generator exposes for feature extraction.
#[derive(Debug, Clone)]
pub struct GlhTrace {
    /// `F_1..F_M`, each `(b, t_m, h_m, w_m)`.
    pub features: Vec<Tensor>,
    /// Second conditional-norm layer of each block.
    pub cbn2: Vec<CbnParams>,
    pub classes: Vec<usize>,
    pub lq_labels: Vec<usize>,
    pub lq_classes: usize,
}

/// Per-block embedding tables.
#[derive(Debug, Clone)]
pub struct CtfEmbedder {
    pub tables: Vec<EmbeddingTable>,
    pub registry: Registry,
}

impl CtfEmbedder {
    /// `block_channels[m]` is `t_m`, the width of `F_m`.
    pub fn new(init: &mut Init, block_channels: &[usize], lq_classes: usize, embed_dim: usize) -> Result<Self> {
        let mut registry = Registry::new("ctf");
        let tables = block_channels
            .iter()
            .enumerate()
            .map(|(m, &t)| EmbeddingTable::new(&mut registry, init, &format!("embed{}", m + 1), 2 * t + lq_classes, embed_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(CtfEmbedder { tables, registry })
    }

    pub fn embed_dim(&self) -> usize {
        self.tables.first().map_or(0, EmbeddingTable::output_dim)
    }
}

/// Builds `CTF_1..CTF_M` from a transfer-generator trace: block 1 against
/// the gray low-quality image, later blocks against their predecessor.
pub fn extract_all_ctfs(trace: &GlhTrace, low_quality: &Tensor, tables: &[EmbeddingTable]) -> Result<Vec<CtfTensor>> {
    let blocks = trace.features.len();
    if blocks == 0 {
        return Err(contract("trace holds no blocks"));
    }
    if trace.cbn2.len() != blocks || tables.len() != blocks {
        return Err(contract(format!(
            "trace has {blocks} feature stacks, {} norm layers and {} embedding tables",
            trace.cbn2.len(),
            tables.len()
        )));
    }
    let lq_one_hot = one_hot(&trace.lq_labels, trace.lq_classes)?.to_dtype(low_quality.dtype())?;
    let mut out = Vec::with_capacity(blocks);
    let mut previous: Option<Resolution> = None;
    for m in 0..blocks {
        let features = &trace.features[m];
        let differences = if m == 0 {
            spectral::difference_map_first(features, low_quality)?
        } else {
            spectral::difference_map_inner(features, &trace.features[m - 1])?
        };
        let (gamma, beta) = trace.cbn2[m].rows(&trace.classes)?;
        let dt = features.dtype();
        let embedding = embed_labels(&gamma.to_dtype(dt)?, &beta.to_dtype(dt)?, &lq_one_hot, &tables[m])?;
        let ctf = assemble_ctf(&differences, &embedding, m + 1, trace.classes.clone(), trace.lq_labels.clone())?;
        let res = ctf.resolution()?;
        if let Some(prev) = previous {
            if !(res.covers(prev) && res != prev) {
                return Err(contract(format!("block {} resolution {res} does not grow from {prev}", m + 1)));
            }
        }
        previous = Some(res);
        out.push(ctf);
    }
    Ok(out)
}

/// Zeroed copies of every feature, preserving shapes.
pub fn zero_ctfs(ctfs: &[CtfTensor]) -> Result<Vec<CtfTensor>> {
    ctfs.iter().map(CtfTensor::zeroed).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use crate::nn::DTYPE;

    #[test]
    fn zero_table_gives_zero_embedding() {
        let dev = Device::Cpu;
        let table = EmbeddingTable::from_weights(Tensor::zeros((5, 3), DType::F32, &dev).unwrap()).unwrap();
        let g = Tensor::new(&[[1.0f32, 2.0]], &dev).unwrap();
        let b = Tensor::new(&[[3.0f32, 4.0]], &dev).unwrap();
        let oh = one_hot(&[0], 1).unwrap();
        let e = embed_labels(&g, &b, &oh, &table).unwrap();
        assert!(e.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_table_reproduces_concatenation() {
        let dev = Device::Cpu;
        let table = EmbeddingTable::from_weights(Tensor::eye(4, DType::F32, &dev).unwrap()).unwrap();
        let g = Tensor::new(&[[0.5f32]], &dev).unwrap();
        let b = Tensor::new(&[[-1.5f32]], &dev).unwrap();
        let oh = one_hot(&[1], 2).unwrap();
        let e = embed_labels(&g, &b, &oh, &table).unwrap();
        assert_eq!(e.to_vec2::<f32>().unwrap(), vec![vec![0.5, -1.5, 0.0, 1.0]]);
    }

    #[test]
    fn mismatched_table_is_rejected() {
        let dev = Device::Cpu;
        let table = EmbeddingTable::from_weights(Tensor::eye(3, DType::F32, &dev).unwrap()).unwrap();
        let g = Tensor::new(&[[0.5f32]], &dev).unwrap();
        let oh = one_hot(&[0], 2).unwrap();
        assert!(matches!(embed_labels(&g, &g, &oh, &table), Err(Error::Contract(_))));
        assert!(matches!(one_hot(&[2], 2), Err(Error::LabelDomain { .. })));
    }

    #[test]
    fn assembly_arity_and_broadcast() {
        let dev = Device::Cpu;
        let h = Tensor::randn(0f32, 1.0, (1, 2, 4, 4), &dev).unwrap();
        let e = Tensor::new(&[[1.0f32, -2.0, 0.25]], &dev).unwrap();
        let ctf = assemble_ctf(&h, &e, 1, vec![0], vec![0]).unwrap();
        assert_eq!(ctf.tensor.dims(), &[1, 5, 4, 4]);
        assert_eq!(ctf.channels(), 5);
        let head = ctf.tensor.narrow(1, 0, 2).unwrap();
        assert_eq!(
            head.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            h.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let tail = ctf.tensor.narrow(1, 2, 3).unwrap().squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        for (ch, want) in tail.iter().zip([1.0f32, -2.0, 0.25]) {
            assert!(ch.iter().flatten().all(|v| *v == want));
        }
        assert_eq!(ctf.tensor.dtype(), DTYPE);
    }

    #[test]
    fn serialised_features_round_trip() {
        let dev = Device::Cpu;
        let ctfs: Vec<CtfTensor> = [2usize, 4]
            .iter()
            .enumerate()
            .map(|(m, &side)| CtfTensor {
                tensor: Tensor::randn(0f32, 1.0, (1, 5, side, side), &dev).unwrap(),
                block_index: m + 1,
                difference_channels: 3,
                embed_channels: 2,
                source_classes: vec![1],
                source_lq_labels: vec![0],
            })
            .collect();
        let bytes = encode_ctfs(&ctfs).unwrap();
        assert_eq!(bytes, encode_ctfs(&ctfs).unwrap());
        let back = decode_ctfs(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ctfs.iter().zip(&back) {
            assert_eq!(a.block_index, b.block_index);
            let diff = (&a.tensor - &b.tensor).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        }
    }
}
