//! Checkpoint container: a self-describing binary file holding the network
//! spec, creation seed, named tensors, training epoch and sampler state.
//!
//! Layout (documented in `docs/formats.md`, stable across versions):
//!
//! ```text
//! bytes 0..8   magic "FPBCKPT1"
//! bytes 8..12  header length (u32, little-endian)
//! header       JSON: spec, seed, epoch, sampler state, recorded robust
//!              accuracy, and the tensor directory (name + shape, in order)
//! payload      tensor data in directory order, f64 little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetworkSpec, Param, ParameterSet};
use crate::sampler::{ScheduleMode, TemporalState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FPBCKPT1";

/// Sampler state carried inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub mode: ScheduleMode,
    pub p_min: f64,
    pub mu: f64,
    pub temporal: TemporalState,
}

/// One saved model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub epoch: usize,
    pub params: ParameterSet,
    pub sampler: SamplerState,
    /// Robust accuracy recorded when this checkpoint was taken, if any.
    pub robust_acc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    seed: u64,
    epoch: usize,
    sampler: SamplerState,
    robust_acc: Option<f64>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = Header {
        spec: checkpoint.spec.clone(),
        seed: checkpoint.seed,
        epoch: checkpoint.epoch,
        sampler: checkpoint.sampler.clone(),
        robust_acc: checkpoint.robust_acc,
        tensors: checkpoint
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    for p in checkpoint.params.iter() {
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        file.read_exact(&mut bytes).map_err(|e| {
            Error::Checkpoint(format!("{}: tensor {} payload: {e}", path.display(), entry.name))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.push(Param {
            name: entry.name,
            tensor: Tensor::from_vec(entry.shape, data)?,
        });
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Ok(Checkpoint {
        spec: header.spec,
        seed: header.seed,
        epoch: header.epoch,
        params: ParameterSet::from_params(params, header.seed)?,
        sampler: header.sampler,
        robust_acc: header.robust_acc,
    })
}
