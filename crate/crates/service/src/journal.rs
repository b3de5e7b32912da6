//! Append-only event journal, one JSON object per line.
//!
//! Every state change is appended and fsynced before the caller sees an
//! acknowledgement, so the journal is the authoritative history: the
//! in-memory index is a pure fold over it, and a restart rebuilds state by
//! replaying the file. Envelope shape:
//!
//! ```json
//! {"ts_ms":1712345678901,"event":"submitted","submission_id":"s1",...}
//! ```
//!
//! `ts_ms` is wall-clock milliseconds and is informational only; replay
//! relies purely on line order.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use privscore_core::dataset::Record;
use privscore_core::model::{ArchSpec, FineTuneStrategy};
use serde::{Deserialize, Serialize};

use crate::types::{ScoreResult, ScoringSettings};
use crate::{ServiceError, ServiceResult};

/// One journal line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalEntry {
    pub ts_ms: u64,
    #[serde(flatten)]
    pub event: JournalEvent,
}

/// Task settings as fixed at registration, minus the file paths of the
/// original request (artifacts are copied into the task directory, so the
/// journal must not depend on the registration-time paths surviving).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisteredTask {
    pub task_id: String,
    pub arch: ArchSpec,
    pub strategy: FineTuneStrategy,
    pub scoring: ScoringSettings,
    pub ensemble_digest: String,
    pub population_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Registered {
        registration: RegisteredTask,
    },
    Submitted {
        submission_id: String,
        contributor_id: String,
        records: Vec<Record>,
    },
    /// A job took ownership of these records. Until a terminal event for
    /// `job_id` follows, the records are in flight; replay marks such jobs
    /// failed and returns the records to the pending pool.
    JobCreated {
        job_id: String,
        record_ids: Vec<String>,
        master_seed: u64,
    },
    JobDone {
        job_id: String,
        results: Vec<ScoreResult>,
        /// Full report written next to the journal, relative to the task dir.
        report_file: String,
    },
    JobFailed {
        job_id: String,
        error: String,
    },
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn io_err(context: &str, path: &Path, err: std::io::Error) -> ServiceError {
    ServiceError::Internal(format!("{context} {}: {err}", path.display()))
}

/// Appends one event and fsyncs the file before returning.
pub fn append(path: &Path, event: &JournalEvent) -> ServiceResult<()> {
    let entry = JournalEntry {
        ts_ms: now_ms(),
        event: event.clone(),
    };
    let mut line = serde_json::to_string(&entry)
        .map_err(|e| ServiceError::Internal(format!("encode journal event: {e}")))?;
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err("open journal", path, e))?;
    file.write_all(line.as_bytes())
        .map_err(|e| io_err("append journal", path, e))?;
    // Ack only after the bytes are durable; otherwise a crash could drop
    // an event the client already saw succeed.
    file.sync_all()
        .map_err(|e| io_err("sync journal", path, e))?;
    Ok(())
}

/// Reads the whole journal in line order.
pub fn read_all(path: &Path) -> ServiceResult<Vec<JournalEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err("read journal", path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: JournalEntry = serde_json::from_str(line).map_err(|e| {
            ServiceError::Internal(format!(
                "parse journal {} line {}: {e}",
                path.display(),
                idx + 1
            ))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}
