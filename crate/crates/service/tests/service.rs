//! End-to-end exercises of the service state machine: lifecycle, batching,
//! validation, durability across restarts, and failed-job requeue.

mod common;

use common::{fixture, quick_strategy, records, Fixture, JOB_TIMEOUT};
use privscore_core::dataset::{self, Record};
use privscore_core::model::FineTuneStrategy;
use privscore_service::journal::{self, JournalEvent};
use privscore_service::types::{
    EnsembleSource, JobStatus, RecordSubmission, ScoringSettings, TaskRegistration,
};
use privscore_service::Service;

/// Registration whose fine-tuning strategy carries an enormous ridge
/// penalty: the penalty term overflows the batch loss within at most two
/// updates whatever the records look like, so every job fails
/// deterministically. The ensemble gets its own healthy strategy, keeping
/// registration itself fine.
fn poisoned_registration(
    fix: &Fixture,
    task_id: &str,
    batch_threshold: usize,
    num_models: usize,
) -> TaskRegistration {
    let mut reg = registration(fix, task_id, batch_threshold, num_models);
    reg.strategy = FineTuneStrategy { l2_penalty: 1e308, ..quick_strategy() };
    reg.ensemble = EnsembleSource::Build {
        k: 4,
        subsample_fraction: 0.5,
        seed: 11,
        strategy: Some(quick_strategy()),
    };
    reg
}

fn registration(
    fix: &Fixture,
    task_id: &str,
    batch_threshold: usize,
    num_models: usize,
) -> TaskRegistration {
    TaskRegistration {
        task_id: task_id.into(),
        base_model_path: fix.base_path.display().to_string(),
        population_path: fix.population_path.display().to_string(),
        strategy: quick_strategy(),
        scoring: ScoringSettings {
            num_models,
            batch_threshold,
            master_seed: 7,
            ..ScoringSettings::default()
        },
        ensemble: EnsembleSource::Build {
            k: 4,
            subsample_fraction: 0.5,
            seed: 11,
            strategy: None,
        },
    }
}

fn submission(submission_id: &str, contributor_id: &str, records: Vec<Record>) -> RecordSubmission {
    RecordSubmission {
        submission_id: submission_id.into(),
        contributor_id: contributor_id.into(),
        records,
    }
}

#[test]
fn lifecycle_scores_two_contributors_in_isolation() {
    let fix = fixture(1);
    let service = Service::open(fix.data_dir()).unwrap();
    let resp = service.register(&registration(&fix, "alpha", 100, 8)).unwrap();
    assert_eq!(resp.task_id, "alpha");
    assert_eq!(resp.population_records, 40);
    assert!(!resp.ensemble_digest.is_empty());

    let r = service.submit("alpha", &submission("s-a", "alice", records("a", 3, 0))).unwrap();
    assert_eq!((r.accepted, r.pending), (3, 3));
    assert!(r.triggered_job.is_none(), "threshold 100 must not trigger");
    let r = service.submit("alpha", &submission("s-b", "bob", records("b", 2, 0))).unwrap();
    assert_eq!((r.accepted, r.pending), (2, 5));

    // Before any job, both contributors see only pending records.
    let s = service.scores("alpha", "alice").unwrap();
    assert!(s.results.is_empty());
    assert_eq!(s.unscored.len(), 3);
    assert!(s.unscored.iter().all(|u| u.state == "pending" && u.job_id.is_none()));

    let view = service.trigger("alpha").unwrap();
    assert_eq!(view.task_id, "alpha");
    assert_eq!(view.records_total, 5);
    assert_eq!(view.models_total, 8);
    let done = service.wait_for_job(&view.job_id, JOB_TIMEOUT).unwrap();
    assert_eq!(done.status, JobStatus::Done);
    assert_eq!(done.models_done, 8);
    assert!(done.error.is_none());

    let alice = service.scores("alpha", "alice").unwrap();
    assert_eq!(alice.results.len(), 3);
    assert!(alice.unscored.is_empty());
    for result in &alice.results {
        assert!(result.record_id.starts_with('a'), "leaked foreign record: {result:?}");
        assert_eq!(result.contributor_id, "alice");
        assert_eq!(result.job_id, view.job_id);
        assert_eq!(result.n, 8);
        assert!(result.c_correct <= 8);
        assert!((0.0..=1.0).contains(&result.score));
    }
    let bob = service.scores("alpha", "bob").unwrap();
    assert_eq!(bob.results.len(), 2);
    assert!(bob.results.iter().all(|r| r.record_id.starts_with('b')));
    let nobody = service.scores("alpha", "nobody").unwrap();
    assert!(nobody.results.is_empty() && nobody.unscored.is_empty());

    // The job's full report is on disk where the journal says it is.
    let report_path = fix.data_dir().join("tasks/alpha/reports").join(format!("{}.json", view.job_id));
    assert!(report_path.is_file());

    // Nothing pending: another trigger is a client error.
    assert_eq!(service.trigger("alpha").unwrap_err().kind(), "invalid");
}

#[test]
fn submissions_trigger_jobs_at_the_batch_threshold() {
    let fix = fixture(2);
    let service = Service::open(fix.data_dir()).unwrap();
    service.register(&registration(&fix, "auto", 3, 4)).unwrap();

    let r = service.submit("auto", &submission("s1", "alice", records("a", 2, 0))).unwrap();
    assert!(r.triggered_job.is_none());
    assert_eq!(r.pending, 2);

    // Crossing the threshold sweeps the whole pool, not just 3 records.
    let r = service.submit("auto", &submission("s2", "bob", records("b", 2, 0))).unwrap();
    let first_job = r.triggered_job.expect("pool of 4 >= threshold 3 must trigger");
    assert_eq!(r.pending, 0);
    let done = service.wait_for_job(&first_job, JOB_TIMEOUT).unwrap();
    assert_eq!(done.status, JobStatus::Done);
    assert_eq!(done.records_total, 4);

    // A single oversized submission triggers on its own.
    let r = service.submit("auto", &submission("s3", "alice", records("a", 3, 10))).unwrap();
    let second_job = r.triggered_job.expect("3 >= threshold must trigger");
    assert_ne!(second_job, first_job);
    let done = service.wait_for_job(&second_job, JOB_TIMEOUT).unwrap();
    assert_eq!(done.status, JobStatus::Done);
    assert_eq!(done.records_total, 3);

    // Every record is scored exactly once across all jobs.
    let mut scored: Vec<String> = ["alice", "bob"]
        .iter()
        .flat_map(|c| service.scores("auto", c).unwrap().results)
        .map(|r| r.record_id)
        .collect();
    scored.sort();
    let mut expected: Vec<String> = records("a", 2, 0)
        .into_iter()
        .chain(records("b", 2, 0))
        .chain(records("a", 3, 10))
        .map(|r| r.id)
        .collect();
    expected.sort();
    assert_eq!(scored, expected);
    assert_eq!(service.jobs("auto").unwrap().len(), 2);
}

#[test]
fn invalid_requests_are_rejected_with_precise_kinds() {
    let fix = fixture(3);
    let service = Service::open(fix.data_dir()).unwrap();

    // Registration-side rejections.
    let mut bad = registration(&fix, "bad id!", 100, 4);
    assert_eq!(service.register(&bad).unwrap_err().kind(), "invalid");
    bad = registration(&fix, "t", 100, 1);
    assert_eq!(service.register(&bad).unwrap_err().kind(), "invalid");
    bad = registration(&fix, "t", 1, 4);
    assert_eq!(service.register(&bad).unwrap_err().kind(), "invalid");
    bad = registration(&fix, "t", 100, 4);
    bad.base_model_path = fix.dir.path().join("missing.json").display().to_string();
    assert_eq!(service.register(&bad).unwrap_err().kind(), "invalid");

    service.register(&registration(&fix, "tasky", 100, 4)).unwrap();
    assert_eq!(
        service.register(&registration(&fix, "tasky", 100, 4)).unwrap_err().kind(),
        "conflict"
    );

    // A reference ensemble must match the population it claims to model.
    let other = fixture(33);
    let mut reg = registration(&other, "refbad", 100, 4);
    reg.ensemble = EnsembleSource::Reference {
        path: fix.data_dir().join("tasks/tasky/ensemble").display().to_string(),
    };
    assert_eq!(service.register(&reg).unwrap_err().kind(), "invalid");
    let mut reg = registration(&fix, "refgood", 100, 4);
    reg.ensemble = EnsembleSource::Reference {
        path: fix.data_dir().join("tasks/tasky/ensemble").display().to_string(),
    };
    service.register(&reg).unwrap();

    // Submission-side rejections.
    let submit_err = |sub: &RecordSubmission| service.submit("tasky", sub).unwrap_err().kind();
    assert_eq!(
        service.submit("ghost", &submission("s", "c", records("x", 2, 0))).unwrap_err().kind(),
        "not_found"
    );
    assert_eq!(submit_err(&submission("bad id", "c", records("x", 2, 0))), "invalid");
    assert_eq!(submit_err(&submission("s", "bad id", records("x", 2, 0))), "invalid");
    assert_eq!(submit_err(&submission("s", "c", vec![])), "invalid");

    let mut dup_in_batch = records("x", 2, 0);
    dup_in_batch[1].id = dup_in_batch[0].id.clone();
    assert_eq!(submit_err(&submission("s", "c", dup_in_batch)), "invalid");

    let mut wrong_dim = records("x", 1, 0);
    wrong_dim[0].features.push(0.0);
    assert_eq!(submit_err(&submission("s", "c", wrong_dim)), "invalid");

    let mut bad_label = records("x", 1, 0);
    bad_label[0].label = 2;
    assert_eq!(submit_err(&submission("s", "c", bad_label)), "invalid");

    let mut nan_feature = records("x", 1, 0);
    nan_feature[0].features[0] = f64::NAN;
    assert_eq!(submit_err(&submission("s", "c", nan_feature)), "invalid");

    // Ids owned by the shadow population are off limits.
    let population = dataset::read_csv(&fix.population_path).unwrap();
    let stolen = Record {
        id: population.records()[0].id.clone(),
        features: vec![0.0, 0.0],
        label: 0,
    };
    assert_eq!(submit_err(&submission("s", "c", vec![stolen])), "invalid");

    // Replays of the same submission id and of an already-stored record.
    service.submit("tasky", &submission("s1", "c", records("x", 2, 0))).unwrap();
    assert_eq!(submit_err(&submission("s1", "c", records("y", 2, 0))), "conflict");
    assert_eq!(submit_err(&submission("s2", "c", records("x", 2, 0))), "conflict");

    // Trigger-side rejections.
    assert_eq!(service.trigger("ghost").unwrap_err().kind(), "not_found");
    assert_eq!(service.trigger("refgood").unwrap_err().kind(), "invalid");
    assert_eq!(service.scores("ghost", "c").unwrap_err().kind(), "not_found");
    assert_eq!(service.job("ghost-0001").unwrap_err().kind(), "not_found");
}

#[test]
fn restart_preserves_scores_and_pending_records() {
    let fix = fixture(4);
    let data_dir = fix.data_dir();
    let (job_id, alice_before) = {
        let service = Service::open(&data_dir).unwrap();
        service.register(&registration(&fix, "persist", 100, 4)).unwrap();
        service.submit("persist", &submission("s1", "alice", records("a", 4, 0))).unwrap();
        let view = service.trigger("persist").unwrap();
        let done = service.wait_for_job(&view.job_id, JOB_TIMEOUT).unwrap();
        assert_eq!(done.status, JobStatus::Done);
        service.submit("persist", &submission("s2", "bob", records("b", 2, 0))).unwrap();
        (view.job_id, service.scores("persist", "alice").unwrap())
    };

    let service = Service::open(&data_dir).unwrap();
    let alice_after = service.scores("persist", "alice").unwrap();
    // Bit-identical scores: the journal round-trips every f64 exactly.
    assert_eq!(alice_after.results, alice_before.results);
    let bob = service.scores("persist", "bob").unwrap();
    assert!(bob.results.is_empty());
    assert_eq!(bob.unscored.len(), 2);
    assert!(bob.unscored.iter().all(|u| u.state == "pending"));

    let job = service.job(&job_id).unwrap();
    assert_eq!(job.status, JobStatus::Done);
    assert_eq!(job.models_done, job.models_total);

    // The task id stays claimed across restarts.
    assert_eq!(
        service.register(&registration(&fix, "persist", 100, 4)).unwrap_err().kind(),
        "conflict"
    );

    // New work lands on the rebuilt state and numbering continues.
    let view = service.trigger("persist").unwrap();
    assert!(view.job_id.ends_with("-0002"), "job id: {}", view.job_id);
    let done = service.wait_for_job(&view.job_id, JOB_TIMEOUT).unwrap();
    assert_eq!(done.status, JobStatus::Done);
    assert_eq!(service.scores("persist", "bob").unwrap().results.len(), 2);
}

#[test]
fn failed_jobs_requeue_their_records() {
    let fix = fixture(5);
    let service = Service::open(fix.data_dir()).unwrap();
    service.register(&poisoned_registration(&fix, "doom", 100, 4)).unwrap();
    service.submit("doom", &submission("s1", "carol", records("c", 3, 0))).unwrap();

    let view = service.trigger("doom").unwrap();
    let failed = service.wait_for_job(&view.job_id, JOB_TIMEOUT).unwrap();
    assert_eq!(failed.status, JobStatus::Failed);
    let message = failed.error.expect("failed job carries its error");
    assert!(message.contains("non-finite"), "unexpected error: {message}");

    // Records went back to pending, so they are not stranded in the dead job.
    let scores = service.scores("doom", "carol").unwrap();
    assert!(scores.results.is_empty());
    assert_eq!(scores.unscored.len(), 3);
    assert!(scores.unscored.iter().all(|u| u.state == "pending" && u.job_id.is_none()));

    // Retrying produces a fresh job id; the dead one stays on record.
    let retry = service.trigger("doom").unwrap();
    assert_ne!(retry.job_id, view.job_id);
    let failed_again = service.wait_for_job(&retry.job_id, JOB_TIMEOUT).unwrap();
    assert_eq!(failed_again.status, JobStatus::Failed);
    assert_eq!(service.jobs("doom").unwrap().len(), 2);

    // The pool keeps accepting records while jobs fail.
    let r = service.submit("doom", &submission("s2", "carol", records("c", 1, 10))).unwrap();
    assert_eq!(r.pending, 4);
}

#[test]
fn interrupted_jobs_fail_on_replay_and_their_records_rescore() {
    let fix = fixture(6);
    let data_dir = fix.data_dir();
    {
        let service = Service::open(&data_dir).unwrap();
        service.register(&registration(&fix, "crashy", 100, 4)).unwrap();
        service.submit("crashy", &submission("s1", "dana", records("d", 3, 0))).unwrap();
    }

    // Simulate a process that died mid-job: ownership was journaled but no
    // terminal event ever followed.
    let journal_path = data_dir.join("tasks/crashy/journal.jsonl");
    journal::append(
        &journal_path,
        &JournalEvent::JobCreated {
            job_id: "crashy-0001".into(),
            record_ids: vec!["d0".into(), "d1".into(), "d2".into()],
            master_seed: 42,
        },
    )
    .unwrap();

    let service = Service::open(&data_dir).unwrap();
    let view = service.job("crashy-0001").unwrap();
    assert_eq!(view.status, JobStatus::Failed);
    assert!(view.error.unwrap().contains("interrupted"));
    let entries = journal::read_all(&journal_path).unwrap();
    assert!(
        matches!(
            &entries.last().unwrap().event,
            JournalEvent::JobFailed { job_id, .. } if job_id == "crashy-0001"
        ),
        "replay must journal the synthesized failure"
    );

    // The records are pending again and a new job picks them all up.
    let scores = service.scores("crashy", "dana").unwrap();
    assert_eq!(scores.unscored.len(), 3);
    let view = service.trigger("crashy").unwrap();
    assert_eq!(view.job_id, "crashy-0002", "counter must skip the dead job's number");
    assert_eq!(view.records_total, 3);
    let done = service.wait_for_job(&view.job_id, JOB_TIMEOUT).unwrap();
    assert_eq!(done.status, JobStatus::Done);
    assert_eq!(service.scores("crashy", "dana").unwrap().results.len(), 3);
}

#[test]
fn restart_autotriggers_a_pool_that_meets_the_threshold() {
    let fix = fixture(7);
    let data_dir = fix.data_dir();
    {
        let service = Service::open(&data_dir).unwrap();
        service.register(&poisoned_registration(&fix, "retry", 2, 4)).unwrap();
        let r = service.submit("retry", &submission("s1", "erin", records("e", 2, 0))).unwrap();
        let job_id = r.triggered_job.expect("threshold 2 triggers at once");
        let failed = service.wait_for_job(&job_id, JOB_TIMEOUT).unwrap();
        assert_eq!(failed.status, JobStatus::Failed);
        // Failure alone must not retrigger, or a deterministic failure
        // would loop; the pool sits pending at shutdown.
        assert_eq!(service.jobs("retry").unwrap().len(), 1);
        assert_eq!(service.scores("retry", "erin").unwrap().unscored.len(), 2);
    }

    // On reopen the pending pool still meets the threshold, so the service
    // gives it one fresh attempt per restart.
    let service = Service::open(&data_dir).unwrap();
    let jobs = service.jobs("retry").unwrap();
    assert_eq!(jobs.len(), 2, "restart must start a new job for the ready pool");
    let new_job = jobs.iter().find(|j| j.job_id.ends_with("-0002")).unwrap();
    let finished = service.wait_for_job(&new_job.job_id, JOB_TIMEOUT).unwrap();
    assert_eq!(finished.status, JobStatus::Failed);
}
