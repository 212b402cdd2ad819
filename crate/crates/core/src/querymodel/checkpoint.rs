//! Model checkpoints as JSON.
//!
//! Layout: `{"format": "odet-checkpoint", "version": 1, "config": {...},
//! "params": [{"name": ..., "shape": [rows, cols], "data": [...]}, ...]}`
//! with `data` row-major. Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Decoder, DecoderConfig};
use super::tape::{Matrix, ParamStore};
use crate::error::CheckpointError;

pub const CHECKPOINT_FORMAT: &str = "odet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: DecoderConfig,
    params: Vec<ParamEntry>,
}

pub fn checkpoint_to_string(model: &Decoder) -> Result<String, CheckpointError> {
    let p = model.params();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params: p
            .names
            .iter()
            .zip(&p.values)
            .map(|(n, m)| ParamEntry {
                name: n.clone(),
                shape: [m.rows, m.cols],
                data: m.data.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<Decoder, CheckpointError> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            format: file.format,
            version: file.version,
        });
    }
    let mut store = ParamStore::new();
    for e in file.params {
        if e.data.len() != e.shape[0] * e.shape[1] {
            return Err(CheckpointError::Mismatch(format!(
                "{}: {} values for shape {:?}",
                e.name,
                e.data.len(),
                e.shape
            )));
        }
        store.push(e.name, Matrix::from_vec(e.shape[0], e.shape[1], e.data));
    }
    Decoder::from_params(file.config, store).map_err(|e| CheckpointError::Mismatch(e.to_string()))
}

pub fn save_checkpoint(model: &Decoder, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Decoder, CheckpointError> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoderConfig {
        DecoderConfig {
            d: 8,
            heads: 2,
            layers: 2,
            k_points: 4,
            classes: 2,
            memory_tokens: 16,
            queries: 5,
            ffn: 8,
            locality: vec![0.0, 10.0],
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Decoder::new(small(), 3).unwrap();
        let text = checkpoint_to_string(&m).unwrap();
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn rejects_foreign_files() {
        let m = Decoder::new(small(), 3).unwrap();
        let text = checkpoint_to_string(&m).unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(checkpoint_from_str(&text), Err(CheckpointError::Version { version: 9, .. })));
        let mut other = small();
        other.d = 16;
        let bigger = Decoder::new(other, 3).unwrap();
        let mut text = checkpoint_to_string(&bigger).unwrap();
        text = text.replacen("\"d\":16", "\"d\":8", 1);
        assert!(matches!(checkpoint_from_str(&text), Err(CheckpointError::Mismatch(_))));
    }
}
