//! Checkpoint container.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "vlprobe-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "params": { "patch_w1": {"rows": r, "cols": c, "data": [...]}, ... }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save→load reproduces
//! every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Model, ModelConfig, Params};

pub const CHECKPOINT_FORMAT: &str = "vlprobe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Params,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params: model.params().clone(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::corrupt(path, format!("serialize: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::corrupt(
            path,
            format!("not a checkpoint (format {:?})", header.format),
        ));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Model::from_parts(file.config, file.params)
}
