mod common;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use alliance_core::promptkit::EvalSetting;
use alliance_core::rater::{
    run_batch, BackendError, BackendInfo, BatchOptions, CompletionRequest, MockBackend, RateError,
    Rater, RaterBackend,
};
use alliance_core::rubric::QuestionId;
use statrs::function::erf::erf;

/// Counts calls and raises `cancel` once `stop_after` calls have been made.
struct Interrupting<'a> {
    inner: &'a MockBackend,
    calls: AtomicUsize,
    stop_after: usize,
    cancel: &'a AtomicBool,
}

impl RaterBackend for Interrupting<'_> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if n >= self.stop_after {
            self.cancel.store(true, Ordering::SeqCst);
        }
        self.inner.complete(request)
    }
}

struct Counting<'a> {
    inner: &'a dyn RaterBackend,
    calls: AtomicUsize,
}

impl RaterBackend for Counting<'_> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

#[test]
fn interrupted_batch_resumes_with_only_missing_calls() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("ratings.jsonl");
    let set = common::first_sessions("e2e/sessions.jsonl", 2);
    let jobs = common::jobs(&set, EvalSetting::DETAILED, 3);
    assert_eq!(jobs.len(), 72);
    let mock = common::mock(common::raw_scores("e2e/truth.jsonl"), 0.7, 5, 0.0);

    let cancel = AtomicBool::new(false);
    let first = Interrupting {
        inner: &mock,
        calls: AtomicUsize::new(0),
        stop_after: 40,
        cancel: &cancel,
    };
    let opts = BatchOptions {
        concurrency_limit: 1,
        store: Some(&store),
        cancel: Some(&cancel),
    };
    let out = run_batch(&jobs, &Rater::new(&first), &opts).unwrap();
    assert_eq!(out.records.len(), 40);
    assert_eq!(out.not_started, 32);
    let persisted = std::fs::read_to_string(&store).unwrap();
    assert_eq!(persisted.lines().count(), 40);

    let second = Counting {
        inner: &mock,
        calls: AtomicUsize::new(0),
    };
    let opts = BatchOptions {
        concurrency_limit: 4,
        store: Some(&store),
        cancel: None,
    };
    let out = run_batch(&jobs, &Rater::new(&second), &opts).unwrap();
    assert_eq!(second.calls.load(Ordering::SeqCst), 32);
    assert_eq!(out.skipped, 40);
    assert_eq!(out.records.len(), 72);
    assert!(out.summary_line().contains("new calls: 32"));

    let third = Counting {
        inner: &mock,
        calls: AtomicUsize::new(0),
    };
    let out = run_batch(&jobs, &Rater::new(&third), &opts).unwrap();
    assert_eq!(third.calls.load(Ordering::SeqCst), 0);
    assert_eq!(out.skipped, 72);
}

#[test]
fn concurrency_does_not_change_the_ratings_file() {
    let dir = tempfile::tempdir().unwrap();
    let set = common::first_sessions("e2e/sessions.jsonl", 4);
    let jobs = common::jobs(&set, EvalSetting::DETAILED_COT, 3);
    let mock = common::mock(common::raw_scores("e2e/truth.jsonl"), 0.7, 9, 0.2);
    let rater = Rater::new(&mock).with_max_retries(20);
    let mut files = Vec::new();
    for limit in [1, 8] {
        let store = dir.path().join(format!("r{limit}.jsonl"));
        let opts = BatchOptions {
            concurrency_limit: limit,
            store: Some(&store),
            cancel: None,
        };
        let out = run_batch(&jobs, &rater, &opts).unwrap();
        assert!(out.failures.is_empty());
        files.push(std::fs::read(&store).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn retries_do_not_change_scores() {
    let set = common::first_sessions("e2e/sessions.jsonl", 3);
    let jobs = common::jobs(&set, EvalSetting::DETAILED_COT, 2);
    let truth = common::raw_scores("e2e/truth.jsonl");
    let clean = common::mock(truth.clone(), 0.7, 21, 0.0);
    let flaky = common::mock(truth, 0.7, 21, 0.4);
    let a = run_batch(&jobs, &Rater::new(&clean), &BatchOptions::default()).unwrap();
    let b = run_batch(
        &jobs,
        &Rater::new(&flaky).with_max_retries(30),
        &BatchOptions::default(),
    )
    .unwrap();
    assert!(b.failures.is_empty());
    assert!(b.retries > 0);
    assert_eq!(b.backend_calls, jobs.len() + b.retries);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(
            (x.key(), x.raw_score, &x.evidence),
            (y.key(), y.raw_score, &y.evidence)
        );
    }
}

#[test]
fn exhausted_parse_retries_are_reported_and_the_batch_continues() {
    let set = common::first_sessions("e2e/sessions.jsonl", 1);
    let jobs = common::jobs(&set, EvalSetting::DETAILED, 1);
    let mock = common::mock(common::raw_scores("e2e/truth.jsonl"), 0.0, 1, 1.0);
    let out = run_batch(
        &jobs,
        &Rater::new(&mock).with_max_retries(2),
        &BatchOptions::default(),
    )
    .unwrap();
    assert_eq!(out.failures.len(), 12);
    assert_eq!(out.backend_calls, 36);
    assert!(matches!(
        out.failures[0].error,
        RateError::ParseExhausted { attempts: 3, .. }
    ));
}

#[test]
fn missing_truth_is_fatal_without_retry() {
    let set = common::first_sessions("e2e/sessions.jsonl", 1);
    let jobs = common::jobs(&set, EvalSetting::DETAILED, 1);
    let mock = common::mock(Default::default(), 0.0, 1, 0.0);
    let out = run_batch(&jobs, &Rater::new(&mock), &BatchOptions::default()).unwrap();
    assert_eq!(out.backend_calls, 12);
    assert!(out
        .failures
        .iter()
        .all(|f| matches!(f.error, RateError::Fatal { .. })));
}

#[test]
fn mock_noise_follows_rounded_gaussian() {
    let sd = 0.7;
    let n = 400usize;
    let truth = (0..n)
        .flat_map(|s| QuestionId::all().map(move |q| ((format!("m{s:04}"), q), 3u8)))
        .collect();
    let mock = common::mock(truth, sd, 77, 0.0);
    let keys: Vec<_> = (0..n)
        .flat_map(|s| {
            QuestionId::all().map(move |q| alliance_core::promptkit::JobKey {
                session_id: format!("m{s:04}"),
                question_id: q,
                run_index: 0,
            })
        })
        .collect();
    let offsets: Vec<i32> = keys
        .iter()
        .map(|k| mock.score_for(k).unwrap() as i32 - 3)
        .collect();
    let total = offsets.len() as f64;
    let mean = offsets.iter().sum::<i32>() as f64 / total;
    let zero_share = offsets.iter().filter(|&&o| o == 0).count() as f64 / total;
    // P(|N(0, sd)| < 0.5).
    let expected_zero = erf(0.5 / (sd * std::f64::consts::SQRT_2));
    assert!(mean.abs() < 0.05, "mean offset {mean}");
    assert!(
        (zero_share - expected_zero).abs() < 0.03,
        "{zero_share} vs {expected_zero}"
    );
    assert!(offsets.iter().all(|o| o.abs() <= 2));
}
