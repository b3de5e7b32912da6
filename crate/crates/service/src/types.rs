//! Request and response payloads of the service API.

use privscore_core::dataset::Record;
use privscore_core::lira::LiraConfig;
use privscore_core::model::FineTuneStrategy;
use privscore_core::{lira, scoring};
use serde::{Deserialize, Serialize};

/// Registers a scoring task. Paths are read by the server process at
/// registration time and copied into the task's own directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRegistration {
    /// Filesystem-safe identifier: `[A-Za-z0-9_-]`, at most 64 chars.
    pub task_id: String,
    /// Model file the scoring jobs fine-tune from.
    pub base_model_path: String,
    /// CSV of the population pool the shadow ensemble draws on. Submitted
    /// records must stay disjoint from it.
    pub population_path: String,
    /// How job models are fine-tuned (and, by default, how shadows train).
    #[serde(default)]
    pub strategy: FineTuneStrategy,
    #[serde(default)]
    pub scoring: ScoringSettings,
    pub ensemble: EnsembleSource,
}

/// Batch-scoring knobs of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringSettings {
    /// Models fine-tuned per job.
    pub num_models: usize,
    /// Pending-pool size that triggers a job automatically.
    pub batch_threshold: usize,
    /// Root seed; per-job seeds derive from it by job index.
    pub master_seed: u64,
    pub lira: LiraConfig,
    pub balanced_columns: bool,
}

impl Default for ScoringSettings {
    fn default() -> Self {
        Self {
            num_models: scoring::DEFAULT_NUM_MODELS,
            batch_threshold: 100,
            master_seed: 0,
            lira: LiraConfig::default(),
            balanced_columns: false,
        }
    }
}

/// Where the task's shadow ensemble comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleSource {
    /// Train one at registration time.
    Build {
        #[serde(default = "default_shadow_count")]
        k: usize,
        #[serde(default = "default_subsample_fraction")]
        subsample_fraction: f64,
        #[serde(default)]
        seed: u64,
        /// Shadow training strategy; the task strategy when omitted.
        #[serde(default)]
        strategy: Option<FineTuneStrategy>,
    },
    /// Load a previously saved ensemble directory. Its population digest
    /// must match the registered population file.
    Reference { path: String },
}

fn default_shadow_count() -> usize {
    lira::DEFAULT_SHADOW_COUNT
}

fn default_subsample_fraction() -> f64 {
    lira::DEFAULT_SUBSAMPLE_FRACTION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub task_id: String,
    pub ensemble_digest: String,
    pub population_records: usize,
}

/// One contributor's batch of records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordSubmission {
    /// Idempotency token, unique within the task. Same charset as task ids.
    pub submission_id: String,
    pub contributor_id: String,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub task_id: String,
    pub submission_id: String,
    pub accepted: usize,
    /// Pool size after this submission (records not yet in a job).
    pub pending: usize,
    /// Set when this submission pushed the pool over the batch threshold.
    pub triggered_job: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub task_id: String,
    pub status: JobStatus,
    pub records_total: usize,
    pub models_total: usize,
    /// Fine-tuned models finished so far; equals `models_total` when done.
    pub models_done: usize,
    pub error: Option<String>,
}

/// One scored record, as persisted and as served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub record_id: String,
    pub contributor_id: String,
    pub job_id: String,
    pub score: f64,
    pub c_correct: usize,
    pub n: usize,
}

/// Where an accepted but not yet scored record currently sits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordStatus {
    pub record_id: String,
    /// `pending` or `in_job`.
    pub state: String,
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoresResponse {
    pub task_id: String,
    pub contributor_id: String,
    /// Scores of this contributor's records, in scoring order.
    pub results: Vec<ScoreResult>,
    /// This contributor's records that have no score yet.
    pub unscored: Vec<RecordStatus>,
}

/// Body shape of every non-2xx response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub error: ErrorBody,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}
