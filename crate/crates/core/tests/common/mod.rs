#![allow(dead_code)]

pub mod oracles;

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use alliance_core::analysis::{read_raw_scores, sheets_from_raw_scores, ScoreSheet};
use alliance_core::promptkit::{enumerate_jobs, EvalSetting, PromptTemplate, RatingJob};
use alliance_core::rater::{MockBackend, MockRaterConfig};
use alliance_core::rubric::{QuestionId, Rubric};
use alliance_core::transcript::{ingest, SessionSet};
use serde_json::Value;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn sessions(rel: &str) -> SessionSet {
    ingest(BufReader::new(File::open(fixture(rel)).unwrap())).unwrap()
}

pub fn raw_scores(rel: &str) -> HashMap<(String, QuestionId), u8> {
    read_raw_scores(BufReader::new(File::open(fixture(rel)).unwrap())).unwrap()
}

pub fn sheets(rel: &str, label: &str) -> Vec<ScoreSheet> {
    sheets_from_raw_scores(&raw_scores(rel), &Rubric::default_english(), label).unwrap()
}

pub fn json(rel: &str) -> Value {
    serde_json::from_reader(File::open(fixture(rel)).unwrap()).unwrap()
}

pub fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

pub fn close(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol
}

#[track_caller]
pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    assert!(
        close(actual, expected, tol),
        "{what}: got {actual}, expected {expected} (tol {tol})"
    );
}

/// Compares `actual` against the golden file, or rewrites the file when
/// `UPDATE_GOLDENS` is set.
#[track_caller]
pub fn golden(rel: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(rel);
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    assert!(
        expected == actual,
        "golden mismatch for {rel}\n--- expected\n{expected}\n--- actual\n{actual}"
    );
}

/// The first `n` sessions of `rel`, in id order.
pub fn first_sessions(rel: &str, n: usize) -> SessionSet {
    let all = sessions(rel);
    let mut picked: Vec<_> = all.iter().cloned().collect();
    picked.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    picked.truncate(n);
    SessionSet::new(picked).unwrap()
}

pub fn jobs(set: &SessionSet, setting: EvalSetting, runs: u32) -> Vec<RatingJob> {
    enumerate_jobs(
        set,
        &Rubric::default_english(),
        &PromptTemplate::default_template(),
        setting,
        runs,
    )
    .unwrap()
}

pub fn mock(
    truth: HashMap<(String, QuestionId), u8>,
    noise_sd: f64,
    seed: u64,
    misbehave_rate: f64,
) -> MockBackend {
    let mut cfg = MockRaterConfig::new(truth);
    cfg.noise_sd = noise_sd;
    cfg.seed = seed;
    cfg.misbehave_rate = misbehave_rate;
    MockBackend::new(cfg).unwrap()
}
