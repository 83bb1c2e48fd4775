//! Acceptance criteria, one PASS/FAIL line each, with wall-clock budgets.
//! Runs without the libtest harness: `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use alliance_core::analysis::{
    aggregate_by_session, alignment, experience_comparison, outcome_correlation, phase_trend,
    read_counselor_meta, self_consistency, ScoreSheet,
};
use alliance_core::feedback::{read_assessments, summarize_assessments};
use alliance_core::promptkit::{build_prompt, EvalSetting, PromptTemplate};
use alliance_core::rater::{
    run_batch, BackendError, BackendInfo, BatchOptions, CompletionRequest, MockBackend, Rater,
    RaterBackend,
};
use alliance_core::rubric::{DimensionId, QuestionId, Rubric};
use alliance_core::stats::{icc, pearson, welch_t, IccForm, RatingMatrix, StatsError};
use common::oracles;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn q(n: u8) -> QuestionId {
    QuestionId::new(n).unwrap()
}

fn dimension_arithmetic() -> Outcome {
    let reference = [
        3.56, 3.69, 3.56, 3.47, 3.46, 3.32, 3.75, 3.57, 3.67, 3.37, 3.39, 3.97,
    ];
    let means: BTreeMap<QuestionId, f64> = QuestionId::all().zip(reference).collect();
    let sheet = ScoreSheet::from_question_means("reference", "annotators", means)
        .map_err(|e| e.to_string())?;
    let goal = format!("{:.2}", sheet.dimension(DimensionId::Goal));
    let bond = format!("{:.2}", sheet.dimension(DimensionId::AffectiveBond));
    let approach = sheet.dimension(DimensionId::Approach);
    ensure!(goal == "3.57", "Goal {goal}");
    ensure!(bond == "3.60", "Affective Bond {bond}");
    ensure!(
        (approach - 3.52).abs() <= 0.01 + 1e-12,
        "Approach {approach}"
    );
    Ok(format!(
        "Goal {goal}, Approach {approach:.3}, Affective Bond {bond}"
    ))
}

fn assessment_averages() -> Outcome {
    let file =
        File::open(common::fixture("assessments/survey.jsonl")).map_err(|e| e.to_string())?;
    let list = read_assessments(BufReader::new(file)).map_err(|e| e.to_string())?;
    let summary = summarize_assessments(&list).map_err(|e| e.to_string())?;
    let got: Vec<String> = summary.average.iter().map(|v| format!("{v:.2}")).collect();
    ensure!(got == ["3.43", "3.49", "3.74"], "averages {got:?}");
    Ok(got.join(", "))
}

fn icc_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 120 {
        let n = rng.random_range(4..=12);
        let k = rng.random_range(2..=5);
        let rows = oracles::random_matrix(&mut rng, n, k);
        let m = RatingMatrix::from_rows(&rows).unwrap();
        match (oracles::icc_ak(&rows), icc(&m, IccForm::AverageK)) {
            (Some(want), Ok(got)) => {
                worst = worst.max((got.icc - want).abs());
                checked += 1;
            }
            (None, Err(StatsError::DegenerateMatrix)) => {}
            (w, g) => return Err(format!("oracle {w:?} vs kernel {g:?}")),
        }
    }
    ensure!(worst <= 1e-9, "max |Δ| {worst:e}");
    for k in 2..=5 {
        let rows: Vec<Vec<f64>> = (1..=6).map(|i| vec![i as f64 * 0.5 + 1.0; k]).collect();
        let got = icc(&RatingMatrix::from_rows(&rows).unwrap(), IccForm::AverageK)
            .map_err(|e| e.to_string())?;
        ensure!(got.icc == 1.0, "identical raters gave {}", got.icc);
    }
    let flat = RatingMatrix::from_flat(5, 3, vec![2.0; 15]).unwrap();
    ensure!(
        icc(&flat, IccForm::AverageK) == Err(StatsError::DegenerateMatrix),
        "all-equal matrix not degenerate"
    );
    Ok(format!("{checked} matrices, max |Δ| {worst:.1e}"))
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, test)
        .map_err(|e| format!("{name}: {e}"))
}

fn non_constant(xs: &[f64]) -> bool {
    xs.iter().any(|&v| (v - xs[0]).abs() > 1e-6)
}

fn correlation_and_t_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut dr, mut dpr, mut dt, mut dpt) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..120 {
        let n = rng.random_range(3..=60);
        let x = oracles::random_sample(&mut rng, n, 3.0, 4.0);
        let slope = rng.random_range(-1.0..1.0);
        let y: Vec<f64> = x
            .iter()
            .map(|v| slope * v + rng.random_range(-1.0..1.0))
            .collect();
        let got = pearson(&x, &y).map_err(|e| e.to_string())?;
        dr = dr.max((got.r - oracles::pearson_r(&x, &y)).abs());
        dpr = dpr.max((got.p - oracles::pearson_p(&x, &y)).abs());

        let (na, nb) = (rng.random_range(3..=30), rng.random_range(3..=30));
        let (sa, sb, cb) = (
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(2.0..4.0),
        );
        let a = oracles::random_sample(&mut rng, na, 3.0, sa);
        let b = oracles::random_sample(&mut rng, nb, cb, sb);
        let got = welch_t(&a, &b).map_err(|e| e.to_string())?;
        let (t, df) = oracles::welch(&a, &b);
        dt = dt.max((got.t - t).abs() / t.abs().max(1.0));
        dpt = dpt.max((got.p - oracles::t_two_sided(t, df)).abs());
    }
    ensure!(
        dr <= 1e-10 && dt <= 1e-10,
        "statistic error r {dr:e}, t {dt:e}"
    );
    ensure!(dpr <= 1e-6 && dpt <= 1e-6, "p error r {dpr:e}, t {dpt:e}");

    let pairs = prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 3..40);
    let scale = || prop_oneof![-20.0..-0.05f64, 0.05..20.0f64];
    run_property(
        "pearson affine",
        (pairs, scale(), -100.0..100.0f64, scale(), -100.0..100.0f64),
        |(pairs, a, b, c, d)| {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if !(non_constant(&x) && non_constant(&y)) {
                return Ok(());
            }
            let base = pearson(&x, &y).unwrap();
            let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let y2: Vec<f64> = y.iter().map(|v| c * v + d).collect();
            let moved = pearson(&x2, &y2).unwrap();
            prop_assert!((moved.r - (a * c).signum() * base.r).abs() < 1e-9);
            Ok(())
        },
    )?;
    let sample = || prop::collection::vec(-50.0..50.0f64, 2..=30);
    run_property("welch antisymmetry", (sample(), sample()), |(a, b)| {
        if !(non_constant(&a) || non_constant(&b)) {
            return Ok(());
        }
        let (ab, ba) = (welch_t(&a, &b).unwrap(), welch_t(&b, &a).unwrap());
        prop_assert_eq!(ab.t, -ba.t);
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        Ok(())
    })?;
    run_property(
        "welch affine",
        (sample(), sample(), scale(), -100.0..100.0f64),
        |(a, b, s, c)| {
            if !(non_constant(&a) || non_constant(&b)) {
                return Ok(());
            }
            let base = welch_t(&a, &b).unwrap();
            let a2: Vec<f64> = a.iter().map(|v| s * v + c).collect();
            let b2: Vec<f64> = b.iter().map(|v| s * v + c).collect();
            let moved = welch_t(&a2, &b2).unwrap();
            prop_assert!((moved.t - s.signum() * base.t).abs() < 1e-7 * base.t.abs().max(1.0));
            Ok(())
        },
    )?;
    Ok(format!(
        "r {dr:.1e}, t {dt:.1e}, p {:.1e}; 3 property suites",
        dpr.max(dpt)
    ))
}

fn noiseless_pipeline() -> Outcome {
    let rubric = Rubric::default_english();
    let set = common::first_sessions("e2e/sessions.jsonl", 10);
    let jobs = common::jobs(&set, EvalSetting::DETAILED, 3);
    ensure!(jobs.len() == 360, "{} jobs", jobs.len());
    let truth = common::raw_scores("e2e/truth.jsonl");
    let mock = common::mock(truth.clone(), 0.0, 1, 0.0);
    let rater = Rater::new(&mock);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    let mut records = Vec::new();
    for limit in [1, 8] {
        let store = dir.path().join(format!("c{limit}.jsonl"));
        let opts = BatchOptions {
            concurrency_limit: limit,
            store: Some(&store),
            cancel: None,
        };
        let out = run_batch(&jobs, &rater, &opts).map_err(|e| e.to_string())?;
        ensure!(out.failures.is_empty(), "{} failures", out.failures.len());
        files.push(std::fs::read(&store).map_err(|e| e.to_string())?);
        records = out.records;
    }
    ensure!(
        files[0] == files[1],
        "ratings differ between concurrency 1 and 8"
    );
    let table = self_consistency(&records, &rubric).map_err(|e| e.to_string())?;
    for question in QuestionId::all() {
        ensure!(
            table.question(question) == Some(1.0),
            "{question} ICC {:?}",
            table.question(question)
        );
    }
    let model = aggregate_by_session(&records, &rubric, "mock").map_err(|e| e.to_string())?;
    let human = alliance_core::analysis::sheets_from_raw_scores(&truth, &rubric, "truth")
        .map_err(|e| e.to_string())?;
    let report = alignment(&model, &human).map_err(|e| e.to_string())?;
    let overall = report.overall().ok_or("overall undefined")?;
    ensure!((overall - 1.0).abs() < 1e-12, "overall r {overall}");
    Ok(format!("ICC 1.0 x12, r {overall}, identical files"))
}

fn noisy_alignment() -> Outcome {
    let interval = common::json("e2e/mc_interval.json");
    let (lo, hi) = (common::f(&interval["lower"]), common::f(&interval["upper"]));
    let sd = common::f(&interval["noise_sd"]);
    let runs = interval["runs"].as_u64().unwrap() as u32;
    let rubric = Rubric::default_english();
    let set = common::sessions("e2e/sessions.jsonl");
    ensure!(set.len() == 60, "{} sessions", set.len());
    let jobs = common::jobs(&set, EvalSetting::DETAILED_COT, runs);
    let truth = common::raw_scores("e2e/truth.jsonl");
    let mock = common::mock(truth.clone(), sd, 20240607, 0.0);
    let opts = BatchOptions {
        concurrency_limit: 8,
        store: None,
        cancel: None,
    };
    let out = run_batch(&jobs, &Rater::new(&mock), &opts).map_err(|e| e.to_string())?;
    let model = aggregate_by_session(&out.records, &rubric, "mock").map_err(|e| e.to_string())?;
    let human = alliance_core::analysis::sheets_from_raw_scores(&truth, &rubric, "truth")
        .map_err(|e| e.to_string())?;
    let r = alignment(&model, &human)
        .map_err(|e| e.to_string())?
        .overall()
        .ok_or("overall undefined")?;
    ensure!(
        (lo..=hi).contains(&r),
        "overall r {r:.4} outside [{lo}, {hi}]"
    );
    Ok(format!("overall r {r:.4} in [{lo}, {hi}]"))
}

fn prompt_goldens() -> Outcome {
    let sessions = common::sessions("small/transcripts.jsonl");
    let session = sessions.get("s001").ok_or("no s001")?;
    let rubric = Rubric::default_english();
    let template = PromptTemplate::default_template();
    let golden_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompts");
    let mut count = 0;
    for setting in EvalSetting::STUDIED_SETTINGS {
        for question in [q(5), q(12)] {
            let prompt = build_prompt(session, question, setting, &rubric, &template)
                .map_err(|e| e.to_string())?;
            let name = format!("{}_{}.txt", setting.to_string().replace('+', "_"), question);
            let want = std::fs::read_to_string(golden_dir.join(&name))
                .map_err(|e| format!("{name}: {e}"))?;
            ensure!(want == prompt.text, "{name} differs");
            if setting.guidelines == alliance_core::rubric::GuidelineMode::Detailed {
                let reference =
                    std::fs::read_to_string(common::fixture(&format!("guidelines/{question}.txt")))
                        .map_err(|e| e.to_string())?;
                let mut lines = reference.lines();
                let text = lines.next().unwrap_or_default().trim();
                ensure!(prompt.text.contains(text), "{name}: question text missing");
                for line in lines {
                    let anchor = line.split_once(" = ").map(|x| x.1).unwrap_or(line);
                    ensure!(prompt.text.contains(anchor), "{name}: anchor missing");
                }
            }
            count += 1;
        }
    }
    Ok(format!("{count} goldens"))
}

struct StopAfter<'a> {
    inner: &'a MockBackend,
    calls: AtomicUsize,
    limit: usize,
    cancel: &'a AtomicBool,
}

impl RaterBackend for StopAfter<'_> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 >= self.limit {
            self.cancel.store(true, Ordering::SeqCst);
        }
        self.inner.complete(request)
    }
}

fn resumability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = dir.path().join("ratings.jsonl");
    let set = common::first_sessions("e2e/sessions.jsonl", 2);
    let jobs = common::jobs(&set, EvalSetting::DETAILED, 3);
    ensure!(jobs.len() == 72, "{} jobs", jobs.len());
    let mock = common::mock(common::raw_scores("e2e/truth.jsonl"), 0.7, 3, 0.0);
    let cancel = AtomicBool::new(false);
    let first = StopAfter {
        inner: &mock,
        calls: AtomicUsize::new(0),
        limit: 40,
        cancel: &cancel,
    };
    let opts = BatchOptions {
        concurrency_limit: 1,
        store: Some(&store),
        cancel: Some(&cancel),
    };
    run_batch(&jobs, &Rater::new(&first), &opts).map_err(|e| e.to_string())?;
    let persisted = std::fs::read_to_string(&store)
        .map_err(|e| e.to_string())?
        .lines()
        .count();
    ensure!(persisted == 40, "{persisted} persisted");
    let never = AtomicBool::new(false);
    let second = StopAfter {
        inner: &mock,
        calls: AtomicUsize::new(0),
        limit: usize::MAX,
        cancel: &never,
    };
    let opts = BatchOptions {
        concurrency_limit: 4,
        store: Some(&store),
        cancel: None,
    };
    let out = run_batch(&jobs, &Rater::new(&second), &opts).map_err(|e| e.to_string())?;
    let calls = second.calls.load(Ordering::SeqCst);
    ensure!(calls == 32, "{calls} calls on rerun");
    ensure!(out.records.len() == 72, "{} records", out.records.len());
    Ok(format!("40 persisted, {calls} calls on rerun"))
}

fn fixture_reports() -> Outcome {
    let tol = 1e-10;
    let phases = common::json("phases/expected.json");
    let trend = phase_trend(
        &common::sheets("phases/scores.jsonl", "truth"),
        &common::sessions("phases/sessions.jsonl"),
    )
    .map_err(|e| e.to_string())?;
    let want_pairs = phases["pairs"].as_array().ok_or("pairs")?;
    ensure!(
        trend.pairs.len() == want_pairs.len(),
        "{} pairs",
        trend.pairs.len()
    );
    for (got, want) in trend.pairs.iter().zip(want_pairs) {
        for (i, ph) in got.phases.iter().enumerate() {
            let w = common::f(&want["phases"][i]["total"]);
            ensure!(
                (ph.total - w).abs() < tol,
                "{} phase {i}: {} vs {w}",
                got.counselor_id,
                ph.total
            );
        }
    }
    let ten = trend
        .pairs
        .iter()
        .find(|p| p.n_sessions == 10)
        .ok_or("no 10-session pair")?;
    let sizes: Vec<usize> = ten.phases.iter().map(|p| p.session_ids.len()).collect();
    ensure!(sizes == [3, 3, 4], "split {sizes:?}");

    let exp = common::json("experience/expected.json");
    let meta = read_counselor_meta(BufReader::new(
        File::open(common::fixture("experience/counselors.jsonl")).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    let report = experience_comparison(
        &common::sheets("experience/scores.jsonl", "truth"),
        &common::sessions("experience/sessions.jsonl"),
        &meta,
    )
    .map_err(|e| e.to_string())?;
    for w in exp["pairs"].as_array().ok_or("pairs")? {
        let (a, b) = (w["a"].as_str().unwrap(), w["b"].as_str().unwrap());
        let got = report.pair(a, b).ok_or(format!("no pair {a}/{b}"))?;
        let sign = if got.a == a { 1.0 } else { -1.0 };
        let t = got.t.ok_or("t undefined")? * sign;
        ensure!(
            (t - common::f(&w["t"])).abs() < 1e-9 * t.abs(),
            "{a}/{b} t {t}"
        );
        let stars = got.significance.map(|s| s.to_string()).unwrap_or_default();
        ensure!(stars == w["stars"].as_str().unwrap(), "{a}/{b} {stars}");
    }
    let ab = report
        .pair("A", "B")
        .and_then(|p| p.significance)
        .map(|s| s.to_string());
    ensure!(ab.as_deref() == Some("***"), "strong vs weak {ab:?}");

    let out = common::json("outcomes/expected.json");
    let planted = common::json("outcomes/planted.json");
    let (rho, band) = (common::f(&planted["rho"]), common::f(&planted["tolerance"]));
    let m = outcome_correlation(
        &common::sheets("outcomes/scores.jsonl", "truth"),
        &common::sessions("outcomes/sessions.jsonl"),
    )
    .map_err(|e| e.to_string())?;
    let mut total_rs = Vec::new();
    for (label, row) in out["rows"].as_object().ok_or("rows")? {
        for (aspect, w) in row.as_object().ok_or("row")? {
            let r = m
                .cell(label, aspect)
                .and_then(|c| c.r)
                .ok_or(format!("{label}/{aspect}"))?;
            ensure!(
                (r - common::f(&w["r"])).abs() < tol,
                "{label}/{aspect} r {r}"
            );
            if label == "Total" {
                ensure!(
                    (r - rho).abs() <= band,
                    "{aspect} r {r} outside {rho}±{band}"
                );
                total_rs.push(format!("{r:.2}"));
            }
        }
    }
    Ok(format!(
        "split 3/3/4, A vs B ***, ORS r {}",
        total_rs.join("/")
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "dimension aggregation reproduces reference dimension means",
            dimension_arithmetic,
            1,
        ),
        (
            "feedback assessment averages 3.43/3.49/3.74",
            assessment_averages,
            1,
        ),
        ("ICC kernel vs exact ANOVA oracle", icc_kernel, 5),
        (
            "Pearson and Welch kernels vs exact oracles, property suites",
            correlation_and_t_kernels,
            5,
        ),
        (
            "noiseless mock pipeline: ICC 1, r 1, concurrency-independent file",
            noiseless_pipeline,
            10,
        ),
        (
            "noisy mock pipeline: overall r inside Monte-Carlo interval",
            noisy_alignment,
            30,
        ),
        (
            "prompt goldens for four settings x two questions",
            prompt_goldens,
            1,
        ),
        (
            "resume after 40 of 72 jobs issues 32 calls",
            resumability,
            5,
        ),
        (
            "phase, experience and outcome reports match tallies",
            fixture_reports,
            10,
        ),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > Duration::from_secs(budget) => {
                Err(format!("{detail}; took {took:.2?}, budget {budget} s"))
            }
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name} ({detail}; {took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
