//! Model checkpoints as JSON. f64 values survive the round trip bit-exactly
//! (shortest-round-trip float formatting), so a reloaded model predicts
//! identically to the saved one.

use crate::error::{Error, Result};
use crate::model::CscModel;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT_TAG: &str = "mlcil-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    model: CscModel,
}

pub fn save_checkpoint(model: &CscModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT_TAG.to_string(),
        model: model.clone(),
    };
    let body = serde_json::to_string(&file)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CscModel> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    let file: CheckpointFile = serde_json::from_str(&body)
        .map_err(|e| Error::ingest(path, format!("not a valid checkpoint: {e}")))?;
    if file.format != FORMAT_TAG {
        return Err(Error::ingest(
            path,
            format!("unsupported checkpoint format {:?}", file.format),
        ));
    }
    file.model.validate_integrity()?;
    Ok(file.model)
}
