//! Versioned model checkpoint container (JSON).
//!
//! ```json
//! {"format":"bayescan-checkpoint","version":1,
//!  "state":{"spec":..,"params":{"mode":..,"tensors":[..]},"prior":..,"epoch":N},
//!  "train_config":{..}|null,"metrics":[..]}
//! ```
//!
//! Floats are written with round-trip precision, so a checkpoint reloads
//! bit-exactly. The training config carries the seed lineage.

use crate::model::{ModelError, ModelState};
use crate::train::{EpochMetrics, TrainConfig};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "bayescan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub state: ModelState,
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn new(state: ModelState, train_config: Option<TrainConfig>, metrics: Vec<EpochMetrics>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            state,
            train_config,
            metrics,
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(out);
        serde_json::to_writer(&mut w, self).map_err(|e| CheckpointError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, CheckpointError> {
        let raw: serde_json::Value =
            serde_json::from_reader(BufReader::new(input)).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(CheckpointError::Format("not a checkpoint file".into()));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let ck: Checkpoint = serde_json::from_value(raw).map_err(|e| CheckpointError::Format(e.to_string()))?;
        // Re-validate parameter shapes against the `ModelSpec`.
        let s = ck.state;
        let state = ModelState::from_parts(s.spec, s.params, s.prior, s.epoch)?;
        Ok(Checkpoint { state, ..ck })
    }

    /// Write atomically: to a sibling temp file, then rename.
    pub fn write_file(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        self.write_to(std::fs::File::create(&tmp)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
