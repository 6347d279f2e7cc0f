use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndexEntry {
    pub step: u64,
    pub path: PathBuf,
}

/// Record of a run: what was asked for, with which seeds, and what it
/// produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Package version plus a hash of the configuration.
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<CheckpointIndexEntry>,
    pub artifacts: Vec<PathBuf>,
    /// `ok`, `failed` or `invalid-config`.
    pub status: String,
    pub error: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: artifact_version(&config),
            config,
            seeds,
            checkpoints: Vec::new(),
            artifacts: Vec::new(),
            status: "ok".into(),
            error: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// `matcomp-lab <version>+<hash>`, where the hash is FNV-1a over the
/// canonical JSON of `config`.
pub fn artifact_version(config: &serde_json::Value) -> String {
    let text = config.to_string();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("matcomp-lab {}+{h:016x}", env!("CARGO_PKG_VERSION"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_depends_on_config() {
        let a = artifact_version(&serde_json::json!({"steps": 1}));
        let b = artifact_version(&serde_json::json!({"steps": 2}));
        assert_ne!(a, b);
        assert_eq!(a, artifact_version(&serde_json::json!({"steps": 1})));
    }
}
