//! Per-generation driver checkpoints: serialized state plus the lineage
//! log cursor, written at the end of every generation.

use anyhow::{Context, Result};
use evonas_core::lineage::LogCursor;
use evonas_core::succession::DriverState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror_free::CheckpointError;

// A local error enum without pulling thiserror into the binary crate.
mod thiserror_free {
    use std::fmt;

    #[derive(Debug)]
    pub enum CheckpointError {
        Missing(PathBuf),
        Corrupt(PathBuf, String),
    }
    use std::path::PathBuf;

    impl fmt::Display for CheckpointError {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match self {
                CheckpointError::Missing(dir) => {
                    write!(f, "no checkpoint found in {}", dir.display())
                }
                CheckpointError::Corrupt(path, message) => {
                    write!(f, "corrupt checkpoint {}: {message}", path.display())
                }
            }
        }
    }

    impl std::error::Error for CheckpointError {}
}

pub use thiserror_free::CheckpointError as Error;
pub type _Unused = CheckpointError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state: DriverState,
    pub cursor: LogCursor,
    /// SHA-256 of the canonical config text this run was started with.
    pub config_digest: String,
}

pub fn config_digest(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

pub fn latest_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.json")
}

fn generation_path(dir: &Path, generation: u32) -> PathBuf {
    dir.join("checkpoints").join(format!("gen-{generation:04}.json"))
}

/// Write the per-generation checkpoint and update the latest pointer.
pub fn save(dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut text = serde_json::to_string_pretty(checkpoint).context("serialize checkpoint")?;
    text.push('\n');
    let per_gen = generation_path(dir, checkpoint.state.generation);
    fs::create_dir_all(per_gen.parent().expect("checkpoints dir"))?;
    fs::write(&per_gen, &text)
        .with_context(|| format!("write {}", per_gen.display()))?;

    let latest = latest_path(dir);
    let tmp = dir.join("checkpoint.json.tmp");
    fs::write(&tmp, &text).with_context(|| format!("write {}", tmp.display()))?;
    fs::rename(&tmp, &latest).with_context(|| format!("replace {}", latest.display()))?;
    Ok(())
}

/// Load the latest checkpoint of a run directory.
pub fn load_latest(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = latest_path(dir);
    let text = match fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::Missing(dir.to_path_buf()))
        }
        Err(e) => return Err(CheckpointError::Corrupt(path, e.to_string())),
    };
    serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = Checkpoint {
            state: DriverState::initial(),
            cursor: LogCursor { offset: 123, next_seq: 7 },
            config_digest: config_digest("{}"),
        };
        save(dir.path(), &checkpoint).unwrap();
        let back = load_latest(dir.path()).unwrap();
        assert_eq!(back, checkpoint);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_latest(dir.path()), Err(CheckpointError::Missing(_))));
    }

    #[test]
    fn corrupt_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(latest_path(dir.path()), "{not json").unwrap();
        assert!(matches!(load_latest(dir.path()), Err(CheckpointError::Corrupt(..))));
    }
}
