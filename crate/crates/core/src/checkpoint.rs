//! Binary checkpoints: magic `TIMC`, `u32` version, `u64` header length, a
//! JSON header with the model config and tensor shapes, then every tensor as
//! little-endian `f64` in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Result, TimError};
use crate::io::write_atomic;
use crate::model::TimModel;
use crate::train::init_rng;

const MAGIC: &[u8; 4] = b"TIMC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Free-form run description, echoed from the producing command.
    #[serde(default)]
    pub run: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

pub fn encode_checkpoint(model: &TimModel, run: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        run,
        tensors: model
            .params
            .iter()
            .map(|(_, name, v)| TensorInfo {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, v) in model.params.iter() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TimModel, CheckpointHeader)> {
    let bad = |reason: &str| TimError::format("checkpoint", reason);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&e.to_string()))?;

    let mut model = TimModel::new(header.model.clone(), &mut init_rng(0))?;
    if model.params.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the model"));
    }
    let mut pos = body;
    for (i, info) in header.tensors.iter().enumerate() {
        let id = model.params.find(&info.name).ok_or_else(|| bad(&format!("unknown tensor {}", info.name)))?;
        if id.0 != i {
            return Err(bad(&format!("tensor {} out of order", info.name)));
        }
        let expected = model.params.get(id).dim();
        if (info.shape[0], info.shape[1]) != expected {
            return Err(bad(&format!("tensor {} has shape {:?}, model expects {:?}", info.name, info.shape, expected)));
        }
        let n = expected.0 * expected.1;
        let end = pos.checked_add(8 * n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated tensor data"))?;
        let values = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.params.get_mut(id) = Array2::from_shape_vec(expected, values).expect("shape checked");
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &TimModel, run: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, run)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(TimModel, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| TimError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters() {
        let mut cfg = ModelConfig::desk();
        cfg.embed_dim = 8;
        cfg.interval_hidden = 8;
        cfg.td_hidden = 8;
        cfg.attention_heads = 2;
        let model = TimModel::new(cfg, &mut init_rng(7)).unwrap();
        let bytes = encode_checkpoint(&model, serde_json::json!({"seed": 7})).unwrap();
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(header.run["seed"], 7);
        for ((_, a, x), (_, b, y)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
