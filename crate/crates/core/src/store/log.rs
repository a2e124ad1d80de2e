use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::consensus::{consensus, ConsensusLabels};
use super::StoreError;
use crate::codebook::{AnnotationRecord, Codebook};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredRecord {
    pub seq: u64,
    pub record: AnnotationRecord,
}

/// Append-only annotation log with an in-memory index of live records.
///
/// Each line of the log is one [`AnnotationRecord`]; its sequence number is
/// its 1-based line number. A later record for the same `(image, annotator)`
/// pair replaces the earlier one in the index.
#[derive(Debug)]
pub struct AnnotationStore {
    codebook: Codebook,
    path: Option<PathBuf>,
    writer: Option<File>,
    capacity: Option<usize>,
    last_seq: u64,
    live: BTreeMap<(String, String), StoredRecord>,
}

impl AnnotationStore {
    pub fn in_memory(codebook: Codebook) -> Self {
        AnnotationStore {
            codebook,
            path: None,
            writer: None,
            capacity: None,
            last_seq: 0,
            live: BTreeMap::new(),
        }
    }

    /// Rebuilds the index from an existing log without opening it for
    /// writing; appends to the returned store stay in memory.
    pub fn replay(codebook: Codebook, path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut store = Self::in_memory(codebook);
        let reader = BufReader::new(File::open(path.as_ref())?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                return Err(StoreError::CorruptLog {
                    line: i + 1,
                    reason: "blank line".into(),
                });
            }
            let rec: AnnotationRecord =
                serde_json::from_str(&line).map_err(|e| StoreError::CorruptLog {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            let violations = store.codebook.validate_record(&rec);
            if !violations.is_empty() {
                return Err(StoreError::CorruptLog {
                    line: i + 1,
                    reason: violations[0].message.clone(),
                });
            }
            store.last_seq += 1;
            store.index(store.last_seq, rec);
        }
        Ok(store)
    }

    /// Opens (creating if needed) a log file and replays it.
    pub fn open(codebook: Codebook, path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut store = if path.exists() {
            Self::replay(codebook, &path)?
        } else {
            Self::in_memory(codebook)
        };
        let writer = OpenOptions::new().create(true).append(true).open(&path)?;
        store.path = Some(path);
        store.writer = Some(writer);
        Ok(store)
    }

    /// Caps the total number of log entries the store accepts.
    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn index(&mut self, seq: u64, record: AnnotationRecord) {
        let key = (record.image_id.clone(), record.annotator_id.clone());
        self.live.insert(key, StoredRecord { seq, record });
    }

    /// Validates and durably appends a record, returning its sequence number.
    pub fn append_record(&mut self, rec: AnnotationRecord) -> Result<u64, StoreError> {
        let violations = self.codebook.validate_record(&rec);
        if !violations.is_empty() {
            return Err(StoreError::ValidationFailed(violations));
        }
        if let Some(cap) = self.capacity {
            if self.last_seq as usize >= cap {
                return Err(StoreError::StorageFull(cap));
            }
        }
        if let Some(w) = self.writer.as_mut() {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            w.write_all(line.as_bytes())?;
            w.flush()?;
            w.sync_data()?;
        }
        self.last_seq += 1;
        self.index(self.last_seq, rec);
        Ok(self.last_seq)
    }

    /// Number of live (non-replaced) records.
    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn get(&self, image_id: &str, annotator_id: &str) -> Option<&StoredRecord> {
        self.live.get(&(image_id.to_string(), annotator_id.to_string()))
    }

    /// Live records ordered by image id, then annotator id.
    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.live.values().map(|s| &s.record)
    }

    pub fn records_for<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a AnnotationRecord> {
        self.live
            .range((image_id.to_string(), String::new())..)
            .take_while(move |((img, _), _)| img == image_id)
            .map(|(_, s)| &s.record)
    }

    pub fn annotators(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.live.keys().map(|(_, a)| a.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn consensus(&self, image_id: &str) -> Result<ConsensusLabels, StoreError> {
        let records: Vec<&AnnotationRecord> = self.records_for(image_id).collect();
        consensus(&self.codebook, image_id, &records)
    }
}
