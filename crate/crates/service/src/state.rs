//! Task state machine and job runner.
//!
//! All task state lives behind one mutex and is mutated journal-first: every
//! transition appends to the task's journal (fsynced) before memory changes,
//! so [`Service::open`] can always rebuild the exact acknowledged state by
//! replay. A data directory belongs to one `Service` instance at a time;
//! concurrent opens of the same directory are not supported.
//!
//! Jobs run on plain worker threads. A worker takes a snapshot of everything
//! it needs at start (batch records, base model, ensemble, seeds) and touches
//! shared state exactly once, at completion, under the same mutex.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use privscore_core::dataset::{self, Dataset, Record};
use privscore_core::lira::{prepare_shadow_ensemble, ShadowEnsemble};
use privscore_core::model::{ArchSpec, FineTuneStrategy, ModelParams};
use privscore_core::rng::{derive_seed, domain};
use privscore_core::scoring::{score_batch_observed, BatchConfig, BatchEvent};

use crate::journal::{self, JournalEvent, RegisteredTask};
use crate::types::{
    EnsembleSource, JobStatus, JobView, RecordStatus, RecordSubmission, RegisterResponse,
    ScoreResult, ScoresResponse, SubmitResponse, TaskRegistration,
};
use crate::{ServiceError, ServiceResult};

const JOURNAL_FILE: &str = "journal.jsonl";
const BASE_MODEL_FILE: &str = "base_model.json";
const POPULATION_FILE: &str = "population.csv";
const ENSEMBLE_DIR: &str = "ensemble";
const REPORTS_DIR: &str = "reports";

/// A record accepted into a task, with who sent it. The submission id is
/// not kept here; the journal retains full submission attribution.
#[derive(Debug, Clone)]
struct StoredRecord {
    record: Record,
    contributor_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RecordState {
    Pending,
    InJob(String),
    Scored { job_id: String },
}

#[derive(Debug, Clone)]
struct RecordSlot {
    stored: StoredRecord,
    state: RecordState,
}

struct JobInfo {
    status: JobStatus,
    record_ids: Vec<String>,
    models_total: usize,
    /// Fine-tuned models finished so far, written by the worker thread.
    progress: Arc<AtomicUsize>,
    error: Option<String>,
    report_file: Option<String>,
}

struct TaskState {
    registration: RegisteredTask,
    dir: PathBuf,
    base: Arc<ModelParams>,
    ensemble: Arc<ShadowEnsemble>,
    population_ids: BTreeSet<String>,
    /// Accepted records in submission order; scoring order follows it.
    records: Vec<RecordSlot>,
    /// Record id to slot position.
    index: BTreeMap<String, usize>,
    submissions: BTreeSet<String>,
    jobs: BTreeMap<String, JobInfo>,
    /// Highest job number used so far; survives restarts via replay.
    job_counter: u64,
    /// Scores in completion order; each record appears at most once because
    /// scored slots never return to the pending pool.
    results: Vec<ScoreResult>,
}

impl TaskState {
    fn journal_path(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    fn pending_count(&self) -> usize {
        self.records.iter().filter(|s| s.state == RecordState::Pending).count()
    }

    fn has_running_job(&self) -> bool {
        self.jobs.values().any(|j| j.status == JobStatus::Running)
    }
}

/// Everything a job worker needs, snapshotted before the thread starts so
/// the run never reads shared state.
struct JobInputs {
    task_id: String,
    job_id: String,
    batch: Dataset,
    base: Arc<ModelParams>,
    ensemble: Arc<ShadowEnsemble>,
    strategy: FineTuneStrategy,
    config: BatchConfig,
    num_models: usize,
    master_seed: u64,
    progress: Arc<AtomicUsize>,
    /// Record id to contributor, for labeling results.
    contributors: BTreeMap<String, String>,
    report_dir: PathBuf,
    journal_path: PathBuf,
}

struct Inner {
    data_dir: PathBuf,
    tasks: Mutex<BTreeMap<String, TaskState>>,
}

/// Handle to the scoring service; clones share state.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn validate_ident(value: &str, what: &str) -> ServiceResult<()> {
    if value.is_empty() || value.len() > 64 {
        return Err(ServiceError::Invalid(format!(
            "{what} must be 1..=64 characters, got {}",
            value.len()
        )));
    }
    if let Some(c) =
        value.chars().find(|c| !c.is_ascii_alphanumeric() && *c != '_' && *c != '-')
    {
        return Err(ServiceError::Invalid(format!(
            "{what} contains {c:?}; allowed: ASCII letters, digits, '_' and '-'"
        )));
    }
    Ok(())
}

fn internal(context: &str) -> impl Fn(&dyn std::fmt::Display) -> ServiceError + '_ {
    move |e| ServiceError::Internal(format!("{context}: {e}"))
}

fn job_view(task_id: &str, task: &TaskState, job_id: &str) -> Option<JobView> {
    let info = task.jobs.get(job_id)?;
    Some(JobView {
        job_id: job_id.to_string(),
        task_id: task_id.to_string(),
        status: info.status,
        records_total: info.record_ids.len(),
        models_total: info.models_total,
        models_done: info.progress.load(Ordering::Relaxed).min(info.models_total),
        error: info.error.clone(),
    })
}

fn mark_job_done(task: &mut TaskState, job_id: &str, results: &[ScoreResult], report_file: &str) {
    if let Some(info) = task.jobs.get_mut(job_id) {
        info.status = JobStatus::Done;
        info.report_file = Some(report_file.to_string());
        info.progress.store(info.models_total, Ordering::Relaxed);
    }
    for slot in &mut task.records {
        if slot.state == RecordState::InJob(job_id.to_string()) {
            slot.state = RecordState::Scored { job_id: job_id.to_string() };
        }
    }
    task.results.extend_from_slice(results);
}

/// Failed jobs hand their records back to the pending pool.
fn mark_job_failed(task: &mut TaskState, job_id: &str, error: &str) {
    if let Some(info) = task.jobs.get_mut(job_id) {
        info.status = JobStatus::Failed;
        info.error = Some(error.to_string());
    }
    for slot in &mut task.records {
        if slot.state == RecordState::InJob(job_id.to_string()) {
            slot.state = RecordState::Pending;
        }
    }
}

impl Service {
    /// Opens (or creates) a data directory and replays every task journal.
    /// Jobs that were mid-flight when the previous process died are marked
    /// failed, their records return to the pending pool, and tasks whose
    /// pool meets the batch threshold start a fresh job immediately.
    pub fn open(data_dir: impl AsRef<Path>) -> ServiceResult<Self> {
        let data_dir = data_dir.as_ref().to_path_buf();
        let tasks_dir = data_dir.join("tasks");
        std::fs::create_dir_all(&tasks_dir)
            .map_err(|e| internal("create data directory")(&e))?;

        let mut names = Vec::new();
        let listing =
            std::fs::read_dir(&tasks_dir).map_err(|e| internal("list task directories")(&e))?;
        for entry in listing {
            let entry = entry.map_err(|e| internal("list task directories")(&e))?;
            if entry.path().is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();

        let service = Self {
            inner: Arc::new(Inner { data_dir, tasks: Mutex::new(BTreeMap::new()) }),
        };
        for name in names {
            let dir = tasks_dir.join(&name);
            if !dir.join(JOURNAL_FILE).exists() {
                // A registration that died before its journal committed; the
                // task never existed, so free the directory for reuse.
                let _ = std::fs::remove_dir_all(&dir);
                continue;
            }
            let task = replay_task(&dir, &name)?;
            service.inner.tasks.lock().unwrap().insert(name, task);
        }

        let task_ids: Vec<String> =
            service.inner.tasks.lock().unwrap().keys().cloned().collect();
        for task_id in task_ids {
            let mut tasks = service.inner.tasks.lock().unwrap();
            if let Some(task) = tasks.get_mut(&task_id) {
                service.maybe_autotrigger_locked(&task_id, task)?;
            }
        }
        Ok(service)
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.data_dir
    }

    /// Registers a task: loads and validates the base model and population,
    /// builds or loads the shadow ensemble, copies all artifacts into the
    /// task's own directory, and commits the registration to the journal.
    pub fn register(&self, reg: &TaskRegistration) -> ServiceResult<RegisterResponse> {
        validate_ident(&reg.task_id, "task_id")?;
        if reg.scoring.num_models < 2 {
            return Err(ServiceError::Invalid(format!(
                "num_models must be >= 2, got {}",
                reg.scoring.num_models
            )));
        }
        if reg.scoring.batch_threshold < 2 {
            return Err(ServiceError::Invalid(format!(
                "batch_threshold must be >= 2, got {}",
                reg.scoring.batch_threshold
            )));
        }
        reg.scoring
            .lira
            .validate()
            .map_err(|e| ServiceError::Invalid(format!("decision rule: {e}")))?;

        let base = ModelParams::load(&reg.base_model_path)
            .map_err(|e| ServiceError::Invalid(format!("base model: {e}")))?;
        let arch = base.arch().clone();
        reg.strategy
            .validate_for(&arch)
            .map_err(|e| ServiceError::Invalid(format!("strategy: {e}")))?;
        let population = dataset::read_csv(&reg.population_path)
            .map_err(|e| ServiceError::Invalid(format!("population: {e}")))?;
        dataset::check_conforms(&population, arch.input_dim, arch.num_classes)
            .map_err(|e| ServiceError::Invalid(format!("population: {e}")))?;

        // Claiming the directory doubles as the uniqueness check, and it
        // happens before ensemble training so a duplicate fails fast.
        let tasks_dir = self.inner.data_dir.join("tasks");
        let dir = tasks_dir.join(&reg.task_id);
        std::fs::create_dir_all(&tasks_dir)
            .map_err(|e| internal("create data directory")(&e))?;
        match std::fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(ServiceError::Conflict(format!(
                    "task {} already exists",
                    reg.task_id
                )));
            }
            Err(e) => {
                return Err(ServiceError::Internal(format!(
                    "create task directory {}: {e}",
                    dir.display()
                )));
            }
        }
        match self.build_task(reg, &dir, base, arch, population) {
            Ok(response) => Ok(response),
            Err(e) => {
                // Nothing was journaled; release the directory.
                let _ = std::fs::remove_dir_all(&dir);
                Err(e)
            }
        }
    }

    fn build_task(
        &self,
        reg: &TaskRegistration,
        dir: &Path,
        base: ModelParams,
        arch: ArchSpec,
        population: Dataset,
    ) -> ServiceResult<RegisterResponse> {
        let ensemble = match &reg.ensemble {
            EnsembleSource::Build { k, subsample_fraction, seed, strategy } => {
                let shadow_strategy = strategy.clone().unwrap_or_else(|| reg.strategy.clone());
                shadow_strategy
                    .validate_for(&arch)
                    .map_err(|e| ServiceError::Invalid(format!("shadow strategy: {e}")))?;
                prepare_shadow_ensemble(
                    &arch,
                    &population,
                    *k,
                    *subsample_fraction,
                    &shadow_strategy,
                    *seed,
                )
                .map_err(|e| ServiceError::Invalid(format!("build ensemble: {e}")))?
            }
            EnsembleSource::Reference { path } => {
                let ensemble = ShadowEnsemble::load_dir(path)
                    .map_err(|e| ServiceError::Invalid(format!("reference ensemble: {e}")))?;
                let shape = ensemble.arch();
                if shape.input_dim != arch.input_dim || shape.num_classes != arch.num_classes {
                    return Err(ServiceError::Invalid(format!(
                        "reference ensemble expects {} features and {} classes, base model has {} and {}",
                        shape.input_dim, shape.num_classes, arch.input_dim, arch.num_classes
                    )));
                }
                if ensemble.provenance().population_digest != population.digest() {
                    return Err(ServiceError::Invalid(
                        "reference ensemble was built from a different population".into(),
                    ));
                }
                ensemble
            }
        };

        base.save(dir.join(BASE_MODEL_FILE))
            .map_err(|e| internal("store base model")(&e))?;
        dataset::write_csv(&population, dir.join(POPULATION_FILE))
            .map_err(|e| internal("store population")(&e))?;
        ensemble
            .save_dir(dir.join(ENSEMBLE_DIR))
            .map_err(|e| internal("store ensemble")(&e))?;
        std::fs::create_dir_all(dir.join(REPORTS_DIR))
            .map_err(|e| internal("create reports directory")(&e))?;

        let registration = RegisteredTask {
            task_id: reg.task_id.clone(),
            arch,
            strategy: reg.strategy.clone(),
            scoring: reg.scoring.clone(),
            ensemble_digest: ensemble.digest(),
            population_digest: population.digest(),
        };
        // Commit point: after this append the task exists.
        journal::append(
            &dir.join(JOURNAL_FILE),
            &JournalEvent::Registered { registration: registration.clone() },
        )?;

        let response = RegisterResponse {
            task_id: reg.task_id.clone(),
            ensemble_digest: registration.ensemble_digest.clone(),
            population_records: population.len(),
        };
        let task = TaskState {
            registration,
            dir: dir.to_path_buf(),
            base: Arc::new(base),
            ensemble: Arc::new(ensemble),
            population_ids: population.records().iter().map(|r| r.id.clone()).collect(),
            records: Vec::new(),
            index: BTreeMap::new(),
            submissions: BTreeSet::new(),
            jobs: BTreeMap::new(),
            job_counter: 0,
            results: Vec::new(),
        };
        self.inner.tasks.lock().unwrap().insert(reg.task_id.clone(), task);
        Ok(response)
    }

    /// Accepts a batch of records, all-or-nothing. Every record must match
    /// the task's shape, carry finite features, and have an id never seen by
    /// the task or its shadow population. May auto-trigger a job.
    pub fn submit(&self, task_id: &str, sub: &RecordSubmission) -> ServiceResult<SubmitResponse> {
        validate_ident(&sub.submission_id, "submission_id")?;
        validate_ident(&sub.contributor_id, "contributor_id")?;
        if sub.records.is_empty() {
            return Err(ServiceError::Invalid("submission carries no records".into()));
        }

        let mut tasks = self.inner.tasks.lock().unwrap();
        let task = tasks
            .get_mut(task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("task {task_id}")))?;
        if task.submissions.contains(&sub.submission_id) {
            return Err(ServiceError::Conflict(format!(
                "submission {} was already accepted",
                sub.submission_id
            )));
        }
        let arch = &task.registration.arch;
        let mut seen = BTreeSet::new();
        for r in &sub.records {
            if r.id.is_empty() {
                return Err(ServiceError::Invalid("record ids must be non-empty".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(ServiceError::Invalid(format!(
                    "record id {} repeats within the submission",
                    r.id
                )));
            }
            if r.features.len() != arch.input_dim {
                return Err(ServiceError::Invalid(format!(
                    "record {} has {} features, task expects {}",
                    r.id,
                    r.features.len(),
                    arch.input_dim
                )));
            }
            if r.label >= arch.num_classes {
                return Err(ServiceError::Invalid(format!(
                    "record {} has label {} but the task has {} classes",
                    r.id, r.label, arch.num_classes
                )));
            }
            if let Some(bad) = r.features.iter().find(|f| !f.is_finite()) {
                return Err(ServiceError::Invalid(format!(
                    "record {} has a non-finite feature ({bad})",
                    r.id
                )));
            }
            if task.index.contains_key(&r.id) {
                return Err(ServiceError::Conflict(format!(
                    "record {} was already submitted",
                    r.id
                )));
            }
            if task.population_ids.contains(&r.id) {
                return Err(ServiceError::Invalid(format!(
                    "record {} collides with the shadow population",
                    r.id
                )));
            }
        }

        journal::append(
            &task.journal_path(),
            &JournalEvent::Submitted {
                submission_id: sub.submission_id.clone(),
                contributor_id: sub.contributor_id.clone(),
                records: sub.records.clone(),
            },
        )?;
        task.submissions.insert(sub.submission_id.clone());
        for record in &sub.records {
            task.index.insert(record.id.clone(), task.records.len());
            task.records.push(RecordSlot {
                stored: StoredRecord {
                    record: record.clone(),
                    contributor_id: sub.contributor_id.clone(),
                },
                state: RecordState::Pending,
            });
        }

        let accepted = sub.records.len();
        let triggered_job = self.maybe_autotrigger_locked(task_id, task)?;
        Ok(SubmitResponse {
            task_id: task_id.to_string(),
            submission_id: sub.submission_id.clone(),
            accepted,
            pending: task.pending_count(),
            triggered_job,
        })
    }

    /// Starts a job over the pending pool regardless of the batch threshold.
    pub fn trigger(&self, task_id: &str) -> ServiceResult<JobView> {
        let mut tasks = self.inner.tasks.lock().unwrap();
        let task = tasks
            .get_mut(task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("task {task_id}")))?;
        if task.has_running_job() {
            return Err(ServiceError::Conflict(
                "a job is already running for this task".into(),
            ));
        }
        let pending = task.pending_count();
        if pending < 2 {
            return Err(ServiceError::Invalid(format!(
                "need at least 2 pending records to score, have {pending}"
            )));
        }
        let job_id = self.start_job_locked(task_id, task)?;
        Ok(job_view(task_id, task, &job_id).expect("job just created"))
    }

    pub fn job(&self, job_id: &str) -> ServiceResult<JobView> {
        let tasks = self.inner.tasks.lock().unwrap();
        for (task_id, task) in tasks.iter() {
            if let Some(view) = job_view(task_id, task, job_id) {
                return Ok(view);
            }
        }
        Err(ServiceError::NotFound(format!("job {job_id}")))
    }

    /// All jobs of a task, oldest first.
    pub fn jobs(&self, task_id: &str) -> ServiceResult<Vec<JobView>> {
        let tasks = self.inner.tasks.lock().unwrap();
        let task = tasks
            .get(task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("task {task_id}")))?;
        Ok(task
            .jobs
            .keys()
            .map(|job_id| job_view(task_id, task, job_id).expect("listed job exists"))
            .collect())
    }

    /// Scores of one contributor's records plus the status of those still
    /// waiting. Unknown contributors get empty lists, not an error.
    pub fn scores(&self, task_id: &str, contributor_id: &str) -> ServiceResult<ScoresResponse> {
        let tasks = self.inner.tasks.lock().unwrap();
        let task = tasks
            .get(task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("task {task_id}")))?;
        let results: Vec<ScoreResult> = task
            .results
            .iter()
            .filter(|r| r.contributor_id == contributor_id)
            .cloned()
            .collect();
        let unscored: Vec<RecordStatus> = task
            .records
            .iter()
            .filter(|s| s.stored.contributor_id == contributor_id)
            .filter_map(|s| match &s.state {
                RecordState::Pending => Some(RecordStatus {
                    record_id: s.stored.record.id.clone(),
                    state: "pending".into(),
                    job_id: None,
                }),
                RecordState::InJob(job_id) => Some(RecordStatus {
                    record_id: s.stored.record.id.clone(),
                    state: "in_job".into(),
                    job_id: Some(job_id.clone()),
                }),
                RecordState::Scored { .. } => None,
            })
            .collect();
        Ok(ScoresResponse {
            task_id: task_id.to_string(),
            contributor_id: contributor_id.to_string(),
            results,
            unscored,
        })
    }

    /// Polls until the job leaves `Running` or the timeout passes.
    pub fn wait_for_job(&self, job_id: &str, timeout: Duration) -> ServiceResult<JobView> {
        let deadline = Instant::now() + timeout;
        loop {
            let view = self.job(job_id)?;
            if view.status != JobStatus::Running {
                return Ok(view);
            }
            if Instant::now() >= deadline {
                return Err(ServiceError::Internal(format!(
                    "job {job_id} still running after {timeout:?}"
                )));
            }
            std::thread::sleep(Duration::from_millis(25));
        }
    }

    fn maybe_autotrigger_locked(
        &self,
        task_id: &str,
        task: &mut TaskState,
    ) -> ServiceResult<Option<String>> {
        if task.has_running_job()
            || task.pending_count() < task.registration.scoring.batch_threshold
        {
            return Ok(None);
        }
        Ok(Some(self.start_job_locked(task_id, task)?))
    }

    /// Journals the job, moves the pending pool into it, and spawns the
    /// worker. Caller holds the task lock and has checked preconditions.
    fn start_job_locked(&self, task_id: &str, task: &mut TaskState) -> ServiceResult<String> {
        task.job_counter += 1;
        let job_id = format!("{task_id}-{:04}", task.job_counter);
        let pending: Vec<usize> = task
            .records
            .iter()
            .enumerate()
            .filter(|(_, s)| s.state == RecordState::Pending)
            .map(|(i, _)| i)
            .collect();
        let record_ids: Vec<String> =
            pending.iter().map(|&i| task.records[i].stored.record.id.clone()).collect();
        let master_seed =
            derive_seed(task.registration.scoring.master_seed, domain::JOB, task.job_counter);

        journal::append(
            &task.journal_path(),
            &JournalEvent::JobCreated {
                job_id: job_id.clone(),
                record_ids: record_ids.clone(),
                master_seed,
            },
        )?;

        let progress = Arc::new(AtomicUsize::new(0));
        for &i in &pending {
            task.records[i].state = RecordState::InJob(job_id.clone());
        }
        task.jobs.insert(
            job_id.clone(),
            JobInfo {
                status: JobStatus::Running,
                record_ids,
                models_total: task.registration.scoring.num_models,
                progress: progress.clone(),
                error: None,
                report_file: None,
            },
        );

        let records: Vec<Record> =
            pending.iter().map(|&i| task.records[i].stored.record.clone()).collect();
        let contributors: BTreeMap<String, String> = pending
            .iter()
            .map(|&i| {
                let stored = &task.records[i].stored;
                (stored.record.id.clone(), stored.contributor_id.clone())
            })
            .collect();
        let batch = Dataset::new(
            task.registration.arch.input_dim,
            task.registration.arch.num_classes,
            records,
        )
        .map_err(|e| internal("assemble job batch")(&e))?;

        let inputs = JobInputs {
            task_id: task_id.to_string(),
            job_id: job_id.clone(),
            batch,
            base: task.base.clone(),
            ensemble: task.ensemble.clone(),
            strategy: task.registration.strategy.clone(),
            config: BatchConfig {
                lira: task.registration.scoring.lira,
                balanced_columns: task.registration.scoring.balanced_columns,
            },
            num_models: task.registration.scoring.num_models,
            master_seed,
            progress,
            contributors,
            report_dir: task.dir.join(REPORTS_DIR),
            journal_path: task.journal_path(),
        };
        let service = self.clone();
        std::thread::spawn(move || service.run_job(inputs));
        Ok(job_id)
    }

    fn run_job(&self, inputs: JobInputs) {
        let JobInputs {
            task_id,
            job_id,
            batch,
            base,
            ensemble,
            strategy,
            config,
            num_models,
            master_seed,
            progress,
            contributors,
            report_dir,
            journal_path,
        } = inputs;

        let outcome: Result<(Vec<ScoreResult>, String), String> = (|| {
            let observe = |event: BatchEvent| {
                let BatchEvent::ModelFineTuned = event;
                progress.fetch_add(1, Ordering::Relaxed);
            };
            let report = score_batch_observed(
                &batch,
                &base,
                &strategy,
                &ensemble,
                &config,
                num_models,
                master_seed,
                &observe,
            )
            .map_err(|e| e.to_string())?;

            // The report must be durable before the journal says it exists.
            let report_file = format!("{REPORTS_DIR}/{job_id}.json");
            let path = report_dir.join(format!("{job_id}.json"));
            let mut file = std::fs::File::create(&path)
                .map_err(|e| format!("create report {}: {e}", path.display()))?;
            file.write_all(report.to_json().as_bytes())
                .map_err(|e| format!("write report {}: {e}", path.display()))?;
            file.sync_all().map_err(|e| format!("sync report {}: {e}", path.display()))?;

            let results = report
                .entries
                .iter()
                .map(|entry| ScoreResult {
                    record_id: entry.id.clone(),
                    contributor_id: contributors.get(&entry.id).cloned().unwrap_or_default(),
                    job_id: job_id.clone(),
                    score: entry.score,
                    c_correct: entry.c_correct,
                    n: entry.n,
                })
                .collect();
            Ok((results, report_file))
        })();

        // Completion commits journal-first under the task lock, so readers
        // never observe a finished job whose effects are missing.
        let mut tasks = self.inner.tasks.lock().unwrap();
        let Some(task) = tasks.get_mut(&task_id) else {
            return;
        };
        let event = match &outcome {
            Ok((results, report_file)) => JournalEvent::JobDone {
                job_id: job_id.clone(),
                results: results.clone(),
                report_file: report_file.clone(),
            },
            Err(message) => {
                JournalEvent::JobFailed { job_id: job_id.clone(), error: message.clone() }
            }
        };
        if let Err(e) = journal::append(&journal_path, &event) {
            // The outcome cannot be made durable; treat the job as failed so
            // its records are not stranded. Replay will agree: the journal
            // has no terminal event, so a restart also fails this job.
            mark_job_failed(task, &job_id, &format!("journal write failed: {e}"));
            return;
        }
        match outcome {
            Ok((results, report_file)) => {
                mark_job_done(task, &job_id, &results, &report_file);
                // A pool that filled up while this job ran starts the next
                // one right away. Failures do not retrigger; their records
                // wait for the next submission or a manual trigger so a
                // deterministic failure cannot loop.
                let _ = self.maybe_autotrigger_locked(&task_id, task);
            }
            Err(message) => {
                mark_job_failed(task, &job_id, &message);
            }
        }
    }
}

/// Rebuilds one task's state from its directory: artifacts from disk,
/// history from the journal.
fn replay_task(dir: &Path, name: &str) -> ServiceResult<TaskState> {
    let journal_path = dir.join(JOURNAL_FILE);
    let entries = journal::read_all(&journal_path)?;
    let mut iter = entries.into_iter();
    let registration = match iter.next().map(|e| e.event) {
        Some(JournalEvent::Registered { registration }) => registration,
        Some(other) => {
            return Err(ServiceError::Internal(format!(
                "task {name}: journal must start with a registration, found {other:?}"
            )));
        }
        None => {
            return Err(ServiceError::Internal(format!("task {name}: journal is empty")));
        }
    };
    if registration.task_id != name {
        return Err(ServiceError::Internal(format!(
            "task directory {name} holds the journal of task {}",
            registration.task_id
        )));
    }

    let base = ModelParams::load(dir.join(BASE_MODEL_FILE))
        .map_err(|e| internal(&format!("task {name}: load base model"))(&e))?;
    let population = dataset::read_csv(dir.join(POPULATION_FILE))
        .map_err(|e| internal(&format!("task {name}: load population"))(&e))?;
    if population.digest() != registration.population_digest {
        return Err(ServiceError::Internal(format!(
            "task {name}: population file does not match the registered digest"
        )));
    }
    let ensemble = ShadowEnsemble::load_dir(dir.join(ENSEMBLE_DIR))
        .map_err(|e| internal(&format!("task {name}: load ensemble"))(&e))?;
    if ensemble.digest() != registration.ensemble_digest {
        return Err(ServiceError::Internal(format!(
            "task {name}: ensemble does not match the registered digest"
        )));
    }

    let mut task = TaskState {
        registration,
        dir: dir.to_path_buf(),
        base: Arc::new(base),
        ensemble: Arc::new(ensemble),
        population_ids: population.records().iter().map(|r| r.id.clone()).collect(),
        records: Vec::new(),
        index: BTreeMap::new(),
        submissions: BTreeSet::new(),
        jobs: BTreeMap::new(),
        job_counter: 0,
        results: Vec::new(),
    };

    for entry in iter {
        match entry.event {
            JournalEvent::Registered { .. } => {
                return Err(ServiceError::Internal(format!(
                    "task {name}: duplicate registration event"
                )));
            }
            JournalEvent::Submitted { submission_id, contributor_id, records } => {
                task.submissions.insert(submission_id);
                for record in records {
                    task.index.insert(record.id.clone(), task.records.len());
                    task.records.push(RecordSlot {
                        stored: StoredRecord {
                            record,
                            contributor_id: contributor_id.clone(),
                        },
                        state: RecordState::Pending,
                    });
                }
            }
            JournalEvent::JobCreated { job_id, record_ids, master_seed: _ } => {
                // Keep the counter ahead of every id ever issued, so new
                // jobs never reuse one even after crashes.
                if let Some(num) =
                    job_id.rsplit('-').next().and_then(|s| s.parse::<u64>().ok())
                {
                    task.job_counter = task.job_counter.max(num);
                }
                for record_id in &record_ids {
                    if let Some(&i) = task.index.get(record_id) {
                        task.records[i].state = RecordState::InJob(job_id.clone());
                    }
                }
                task.jobs.insert(
                    job_id,
                    JobInfo {
                        status: JobStatus::Running,
                        record_ids,
                        models_total: task.registration.scoring.num_models,
                        progress: Arc::new(AtomicUsize::new(0)),
                        error: None,
                        report_file: None,
                    },
                );
            }
            JournalEvent::JobDone { job_id, results, report_file } => {
                mark_job_done(&mut task, &job_id, &results, &report_file);
            }
            JournalEvent::JobFailed { job_id, error } => {
                mark_job_failed(&mut task, &job_id, &error);
            }
        }
    }

    // A job with no terminal event died with the previous process.
    let interrupted: Vec<String> = task
        .jobs
        .iter()
        .filter(|(_, info)| info.status == JobStatus::Running)
        .map(|(id, _)| id.clone())
        .collect();
    for job_id in interrupted {
        let error = "interrupted by restart";
        journal::append(
            &journal_path,
            &JournalEvent::JobFailed { job_id: job_id.clone(), error: error.into() },
        )?;
        mark_job_failed(&mut task, &job_id, error);
    }
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ident_rules() {
        assert!(validate_ident("task-1_A", "task_id").is_ok());
        assert!(validate_ident("", "task_id").is_err());
        assert!(validate_ident(&"x".repeat(65), "task_id").is_err());
        assert!(validate_ident("has space", "task_id").is_err());
        assert!(validate_ident("dot.dot", "task_id").is_err());
        assert!(validate_ident("slash/", "task_id").is_err());
    }

    #[test]
    fn open_creates_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let service = Service::open(dir.path().join("data")).unwrap();
        assert!(service.data_dir().join("tasks").is_dir());
        assert_eq!(service.job("nope-0001").unwrap_err().kind(), "not_found");
    }

    #[test]
    fn open_sweeps_uncommitted_task_directories() {
        let dir = tempfile::tempdir().unwrap();
        let stale = dir.path().join("data/tasks/half-registered");
        std::fs::create_dir_all(&stale).unwrap();
        std::fs::write(stale.join("base_model.json"), "{}").unwrap();
        let _service = Service::open(dir.path().join("data")).unwrap();
        assert!(!stale.exists(), "journal-less task dir must be removed");
    }
}
