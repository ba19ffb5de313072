//! Versioned checkpoint archive.
//!
//! Layout: a magic line, one JSON header line (version, model config,
//! optional training config, tensor table), then every tensor as
//! little-endian `f32` in table order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::network::EgomotionNet;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &str = "TAVO-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    /// Full training configuration when the checkpoint came from `train`.
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(net: &EgomotionNet, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (name, var) in net.params().named() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
        });
        for x in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: net.config.clone(),
        train: train.cloned(),
        tensors,
    };
    let mut out = Vec::with_capacity(blob.len() + 4096);
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Writes through a temporary file and a rename so a failed save leaves no
/// partial checkpoint.
pub fn save_checkpoint(path: &Path, net: &EgomotionNet, train: Option<&TrainConfig>) -> Result<()> {
    let bytes = checkpoint_bytes(net, train)?;
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint_header(reader: &mut impl BufRead) -> Result<CheckpointHeader> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "format version {v} is not supported (expected {CHECKPOINT_VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("header has no version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EgomotionNet, CheckpointHeader)> {
    let mut reader = BufReader::new(bytes);
    let header = read_checkpoint_header(&mut reader)?;
    let net = EgomotionNet::new(&header.model, 0)?;
    let named = net.params().named();
    if named.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            named.len()
        )));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != 4 * total {
        return Err(Error::Checkpoint(format!("payload is {} bytes, header implies {}", blob.len(), 4 * total)));
    }
    let mut offset = 0;
    for (entry, (name, var)) in header.tensors.iter().zip(named) {
        if &entry.name != name || entry.shape != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {name} {:?}",
                entry.name,
                entry.shape,
                var.dims()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let values: Vec<f32> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += 4 * n;
        var.set(&Tensor::from_vec(values, entry.shape.as_slice(), var.device())?)?;
    }
    Ok((net, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(EgomotionNet, CheckpointHeader)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
