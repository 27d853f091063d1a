use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{decode, encode, file_hash, Tensor, TensorData};
use super::atomic_write;
use crate::denoiser::{Arch, DenoiserModel};
use crate::error::{Error, Result};

const ARCH_TENSOR: &str = "arch";
const META_TENSOR: &str = "meta";

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `teacher`, `student` or `ema`.
    pub role: String,
    pub step: u64,
    pub seed: u64,
    /// Content hash of the teacher checkpoint a student was distilled from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub meta: CheckpointMeta,
    /// Hex content hash from the file trailer.
    pub hash: String,
}

fn arch_values(a: &Arch) -> Vec<i64> {
    [a.latent_dim, a.width, a.depth, a.content_dim, a.f0_dim, a.speaker_dim, a.time_freqs, a.time_dim, a.steps]
        .iter()
        .map(|&v| v as i64)
        .collect()
}

fn arch_from(values: &[i64]) -> Result<Arch> {
    let v: Vec<usize> = values
        .iter()
        .map(|&x| usize::try_from(x).map_err(|_| Error::Format(format!("negative architecture field {x}"))))
        .collect::<Result<_>>()?;
    if v.len() != 9 {
        return Err(Error::Format(format!("architecture record has {} fields, expected 9", v.len())));
    }
    Ok(Arch {
        latent_dim: v[0],
        width: v[1],
        depth: v[2],
        content_dim: v[3],
        f0_dim: v[4],
        speaker_dim: v[5],
        time_freqs: v[6],
        time_dim: v[7],
        steps: v[8],
    })
}

pub fn encode_checkpoint(model: &DenoiserModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut tensors = vec![
        Tensor::new(ARCH_TENSOR, vec![9], TensorData::I64(arch_values(model.arch())))?,
        Tensor::new(META_TENSOR, vec![json.len() as u64], TensorData::U8(json))?,
    ];
    for (spec, data) in model.tensors() {
        tensors.push(Tensor::new(spec.name.clone(), vec![spec.rows as u64, spec.cols as u64], TensorData::F64(data.to_vec()))?);
    }
    Ok(encode(&tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let tensors = decode(bytes)?;
    let find = |name: &str| tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")));
    let arch = arch_from(find(ARCH_TENSOR)?.i64s()?)?;
    let meta: CheckpointMeta = serde_json::from_slice(find(META_TENSOR)?.bytes()?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut params = Vec::new();
    for t in tensors.iter().filter(|t| t.name != ARCH_TENSOR && t.name != META_TENSOR) {
        if t.dims.len() != 2 {
            return Err(Error::Format(format!("parameter {} has rank {}", t.name, t.dims.len())));
        }
        params.push((t.name.as_str(), (t.dims[0] as usize, t.dims[1] as usize), t.f64s()?));
    }
    let model = DenoiserModel::from_tensors(arch, params)?;
    Ok(Checkpoint { model, meta, hash: file_hash(bytes)? })
}

/// Writes the checkpoint atomically and returns its content hash.
pub fn save_checkpoint(path: &Path, model: &DenoiserModel, meta: &CheckpointMeta) -> Result<String> {
    let bytes = encode_checkpoint(model, meta)?;
    atomic_write(path, &bytes)?;
    file_hash(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
