//! Privacy scoring as a long-running service.
//!
//! A model builder registers a scoring task (base model, shadow ensemble,
//! training strategy, decision rule). Data contributors then stream records
//! in; once enough are pending, the service snapshots the pool into a
//! scoring job, runs the batch pipeline in the background, and serves each
//! contributor exactly their own records' scores.
//!
//! Durability model: every state change is appended to a per-task JSONL
//! journal and fsynced *before* the call returns. The in-memory index is a
//! pure fold over the journal, so a process kill at any point loses nothing
//! that was acknowledged: on restart the journal replays, jobs that were
//! mid-flight are marked failed, and their records return to the pending
//! pool for a later job.
//!
//! Module map: [`types`] carries the API payloads, [`journal`] the on-disk
//! event format, [`state`] the state machine and job runner, [`http`] the
//! axum surface.

pub mod http;
pub mod journal;
pub mod state;
pub mod types;

mod error;

pub use error::{ServiceError, ServiceResult};
pub use state::Service;
