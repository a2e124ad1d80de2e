//! Cluster manifests, image tasks, the append-only annotation log and the
//! per-image consensus that turns several annotators into one label set.

mod consensus;
mod log;
mod manifest;

pub use consensus::{consensus, write_consensus_csv, ConsensusLabels};
pub use log::{AnnotationStore, StoredRecord};
pub use manifest::{
    ingest_manifest, medoid, rank_entries, read_tasks, write_tasks, ClusterManifest, ImageTask,
    ManifestEntry, Platform, SamplingPlan, ViralityClass,
};

use thiserror::Error;

use crate::codebook::Violation;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("pool too small: {0}")]
    PoolTooSmall(String),
    #[error("distance table is not symmetric at ({0}, {1})")]
    AsymmetricDistance(String, String),
    #[error("distance table is invalid: {0}")]
    InvalidDistance(String),
    #[error("no points given")]
    EmptyInput,
    #[error("record failed validation with {} violation(s)", .0.len())]
    ValidationFailed(Vec<Violation>),
    #[error("store is full (capacity {0} records)")]
    StorageFull(usize),
    #[error("no annotation records for image `{0}`")]
    NoRecords(String),
    #[error("annotation log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
