//! Vector-store snapshot files.

use std::path::{Path, PathBuf};

use va_core::vectorstore::StoreError;
use va_core::VectorStore;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot IO failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt snapshot {path}: {reason}")]
    CorruptSnapshot { path: PathBuf, reason: String },
}

/// Writes through a temporary sibling file and renames it into place, so a
/// crash never leaves a half-written snapshot behind.
pub fn save_snapshot(store: &VectorStore, path: &Path) -> Result<(), SnapshotError> {
    let io = |source| SnapshotError::IoFailure {
        path: path.to_owned(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, store.to_json()).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

pub fn load_snapshot(path: &Path) -> Result<VectorStore, SnapshotError> {
    let text = std::fs::read_to_string(path).map_err(|source| SnapshotError::IoFailure {
        path: path.to_owned(),
        source,
    })?;
    VectorStore::from_json(&text).map_err(|e| SnapshotError::CorruptSnapshot {
        path: path.to_owned(),
        reason: match e {
            StoreError::CorruptSnapshot(reason) => reason,
            other => other.to_string(),
        },
    })
}
