//! Durable storage: a filesystem object store for page images, checkpoint
//! payloads and results, and a tracking store for document records.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! blobs/<hh>/<encoded key>     one file per blob, hash-prefixed header
//! tracking/records.log         one JSON record per line, latest wins
//! ```

mod blob;
mod tracking;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::clock::Clock;
use crate::domain::{Step, TransitionError};

pub use blob::{Blob, BlobStore, PutFault};
pub use tracking::{StatusView, StepCheckpoint, StepTiming, TrackingRecord, TrackingStore};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("content hash mismatch for {0}")]
    HashMismatch(String),
    #[error("blob key must be non-empty")]
    EmptyKey,
    #[error("record {0} already exists")]
    AlreadyExists(String),
    #[error("step {0} is not in the document's pipeline")]
    UnknownStep(Step),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("injected storage fault on {0}")]
    Injected(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Both stores rooted in one directory.
pub struct Store {
    root: PathBuf,
    pub blobs: Arc<BlobStore>,
    pub tracking: TrackingStore,
}

impl Store {
    pub fn open(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let blobs = Arc::new(BlobStore::open(root.join("blobs"))?);
        let tracking = TrackingStore::open(root.join("tracking"), blobs.clone(), clock)?;
        Ok(Store { root, blobs, tracking })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
