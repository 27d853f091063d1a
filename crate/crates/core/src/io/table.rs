use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use super::atomic_write;
use super::container::{decode, encode, Tensor, TensorData};
use crate::error::{Error, Result};

/// Latent rows plus optional per-row component labels, stored in the tensor
/// container as `z` (rows x dim, f64) and `component` (rows, i64).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFile {
    pub z: Array2<f64>,
    pub component: Option<Vec<usize>>,
}

pub fn write_latents(path: &Path, latents: &LatentFile) -> Result<String> {
    let (n, d) = latents.z.dim();
    let mut tensors = vec![Tensor::new("z", vec![n as u64, d as u64], TensorData::F64(latents.z.iter().copied().collect()))?];
    if let Some(c) = &latents.component {
        tensors.push(Tensor::new("component", vec![c.len() as u64], TensorData::I64(c.iter().map(|&k| k as i64).collect()))?);
    }
    let bytes = encode(&tensors);
    atomic_write(path, &bytes)?;
    super::file_hash(&bytes)
}

pub fn read_latents(path: &Path) -> Result<LatentFile> {
    let tensors = decode(&std::fs::read(path)?)?;
    let z = tensors.iter().find(|t| t.name == "z").ok_or_else(|| Error::Format("latent file lacks 'z'".into()))?;
    if z.dims.len() != 2 {
        return Err(Error::Format("latent tensor must have rank 2".into()));
    }
    let z_arr = Array2::from_shape_vec((z.dims[0] as usize, z.dims[1] as usize), z.f64s()?.to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    let component = match tensors.iter().find(|t| t.name == "component") {
        Some(t) => {
            let c = t.i64s()?.iter().map(|&k| usize::try_from(k).map_err(|_| Error::Format("negative component label".into()))).collect::<Result<Vec<_>>>()?;
            if c.len() != z_arr.nrows() {
                return Err(Error::Format("component labels do not match row count".into()));
            }
            Some(c)
        }
        None => None,
    };
    Ok(LatentFile { z: z_arr, component })
}

/// Serializes records with a header row and writes atomically.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    atomic_write(path, &bytes)
}
