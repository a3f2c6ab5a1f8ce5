//! Per-trial checkpoint for resuming interrupted runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EngineError, TrialOutput};

/// Completed trials of a run, tagged with a digest of everything that
/// determines the run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_digest: String,
    pub trials: Vec<TrialOutput>,
}

impl Checkpoint {
    pub fn new(run_digest: String) -> Self {
        Self {
            run_digest,
            trials: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let err = |message: String| EngineError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Write atomically: a temporary sibling file renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let err = |e: std::io::Error| EngineError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        std::fs::write(&tmp, bytes).map_err(err)?;
        std::fs::rename(&tmp, path).map_err(err)
    }
}
