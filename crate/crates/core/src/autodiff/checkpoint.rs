//! Checkpoint file format: an 8-byte little-endian header length, a JSON
//! header mapping tensor name → {shape, dtype, byte offset}, then one flat
//! little-endian float blob, row-major. Offsets are relative to the blob.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

fn scalar_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

/// Writes one or more parameter sets into a single checkpoint file.
/// Tensor names must be globally unique across the sets.
pub fn save_checkpoint<T: Scalar>(path: &Path, sets: &[&ParamSet<T>]) -> Result<()> {
    let mut header: BTreeMap<String, TensorMeta> = BTreeMap::new();
    let width = scalar_width(T::DTYPE)?;
    let mut offset = 0u64;
    for set in sets {
        for (name, tensor) in set.iter() {
            if header
                .insert(
                    name.to_string(),
                    TensorMeta {
                        shape: tensor.shape().to_vec(),
                        dtype: T::DTYPE.to_string(),
                        offset,
                    },
                )
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            offset += (tensor.len() * width) as u64;
        }
    }
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for set in sets {
        for (_, tensor) in set.iter() {
            for v in tensor.data() {
                let x = v.as_f64();
                if width == 4 {
                    out.write_all(&(x as f32).to_le_bytes())?;
                } else {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back into one parameter set, tensors ordered by their
/// blob offsets. Dtype must match the requested float width.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: BTreeMap<String, TensorMeta> = serde_json::from_slice(&header_bytes)?;
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;

    let mut ordered: Vec<(&String, &TensorMeta)> = header.iter().collect();
    ordered.sort_by_key(|(_, meta)| meta.offset);

    let mut set = ParamSet::new();
    for (name, meta) in ordered {
        if meta.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype {}, expected {}",
                meta.dtype,
                T::DTYPE
            )));
        }
        let width = scalar_width(&meta.dtype)?;
        let count: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        let end = start + count * width;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {name} overruns the blob")));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..end].chunks_exact(width) {
            let v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().unwrap())
            };
            data.push(T::of_f64(v));
        }
        set.add(name.clone(), Tensor::from_vec(&meta.shape, data)?)?;
    }
    Ok(set)
}

/// Names in a checkpoint header without loading the blob.
pub fn checkpoint_names(path: &Path) -> Result<Vec<String>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: BTreeMap<String, TensorMeta> = serde_json::from_slice(&header_bytes)?;
    Ok(header.keys().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_shapes() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let mut set = ParamSet::<f32>::new();
        set.add("spt.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()).unwrap();
        set.add("spt.b", Tensor::from_vec(&[2], vec![0.25, -0.75]).unwrap()).unwrap();
        save_checkpoint(&path, &[&set]).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert!(loaded.values_equal(&set));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_test2_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut set = ParamSet::<f32>::new();
        set.add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        save_checkpoint(&path, &[&set]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
