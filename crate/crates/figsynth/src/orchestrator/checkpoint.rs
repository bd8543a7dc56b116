//! Durable per-stage state for resumable pipeline passes.
//!
//! Each pass owns a directory holding an append-only staging log of
//! accepted records, a persisted dedup key store, and a checkpoint state
//! file. Resuming from a checkpoint never re-emits an already-staged
//! record: completed work units are skipped wholesale.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::filters::DedupStore;
use crate::pairs::write_atomic;

use super::OrchestratorError;

/// A unit of resumable work, identified by a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub id: String,
    pub dialect: crate::modelgate::Dialect,
}

/// Checkpointed progress of one pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineState {
    /// Which driver wrote this state: "round", "translate" or "synth".
    pub kind: String,
    pub round_index: u32,
    pub stage: String,
    pub work_list: Vec<WorkUnit>,
    pub completed: usize,
    pub stats: super::RoundStats,
    pub config_digest: String,
    #[serde(default)]
    pub aux: std::collections::BTreeMap<String, String>,
}

pub struct CheckpointStore {
    dir: PathBuf,
}

impl CheckpointStore {
    pub fn new(dir: &Path) -> Result<CheckpointStore, OrchestratorError> {
        fs::create_dir_all(dir).map_err(|e| {
            OrchestratorError::CheckpointIo(format!("create {}: {e}", dir.display()))
        })?;
        Ok(CheckpointStore {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn state_path(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    fn staging_path(&self) -> PathBuf {
        self.dir.join("staging.jsonl")
    }

    fn dedup_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.keys"))
    }

    pub fn load_state(&self) -> Option<PipelineState> {
        let text = fs::read_to_string(self.state_path()).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save_state(&self, state: &PipelineState) -> Result<(), OrchestratorError> {
        let bytes = serde_json::to_vec_pretty(state).expect("state serializes");
        write_atomic(&self.state_path(), &bytes)
            .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))
    }

    pub fn is_complete(&self) -> bool {
        self.load_state().is_some_and(|s| s.stage == "complete")
    }

    /// Append records to the staging log and make them durable.
    pub fn append_staging<T: Serialize>(&self, records: &[T]) -> Result<(), OrchestratorError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.staging_path())
            .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("staged record serializes");
            buf.push(b'\n');
        }
        file.write_all(&buf)
            .and_then(|_| file.sync_all())
            .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))
    }

    pub fn load_staging<T: DeserializeOwned>(&self) -> Result<Vec<T>, OrchestratorError> {
        let path = self.staging_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
        let mut out = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let record: T = serde_json::from_str(line)
                .map_err(|e| OrchestratorError::CheckpointIo(format!("staging line: {e}")))?;
            out.push(record);
        }
        Ok(out)
    }

    /// Persist a dedup store (whole-file atomic rewrite of sorted keys).
    pub fn save_dedup(&self, name: &str, store: &DedupStore) -> Result<(), OrchestratorError> {
        let mut buf = Vec::new();
        for key in store.keys() {
            buf.extend_from_slice(key.as_bytes());
            buf.push(b'\n');
        }
        write_atomic(&self.dedup_path(name), &buf)
            .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))
    }

    pub fn load_dedup(&self, name: &str) -> DedupStore {
        match fs::read_to_string(self.dedup_path(name)) {
            Ok(text) => DedupStore::with_keys(text.lines().map(str::to_string)),
            Err(_) => DedupStore::new(),
        }
    }
}
