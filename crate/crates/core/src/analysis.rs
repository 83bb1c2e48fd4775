//! Score sheets and the reports built from them.
//!
//! Every report has a line-delimited record form ([`Report::records`]) and
//! an aligned text form ([`Report::render_text`]). Cells that cannot be
//! computed are carried as `None` and rendered as [`UNDEFINED`], or [`NO_SD`]
//! for standard deviations, rather than being dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::rater::RatingRecord;
use crate::rubric::{DimensionId, QuestionId, Rubric, RubricError};
use crate::stats::{
    icc, mean, pearson, sample_sd, significance_stars, welch_t, IccForm, RatingMatrix,
    Significance, StatsError,
};
use crate::transcript::{OutcomeRecord, SessionSet};

pub const UNDEFINED: &str = "undefined";
pub const NO_SD: &str = "—";

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("session {session_id}: no ratings for {question}")]
    MissingQuestion {
        session_id: String,
        question: QuestionId,
    },
    #[error("aggregate expects one session, got `{0}` and `{1}`")]
    MixedSessions(String, String),
    #[error("no rating records")]
    NoRecords,
    #[error("{session_id}/{question}: {found} runs where {expected} were expected; self-consistency needs equal run counts")]
    RunCountMismatch {
        session_id: String,
        question: QuestionId,
        expected: usize,
        found: usize,
    },
    #[error("{session_id}/{question}: rated by {found:?}, expected {expected:?}")]
    RaterMismatch {
        session_id: String,
        question: QuestionId,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("duplicate score sheet for session {0}")]
    DuplicateSheet(String),
    #[error("{what}: need at least {needed}, have {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("session {0} is not in the transcript set")]
    UnknownSession(String),
    #[error(transparent)]
    Rubric(#[from] RubricError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Mean normalized scores for one session from one rater (or one pool of
/// annotators).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub session_id: String,
    pub rater_id: String,
    pub per_question: BTreeMap<QuestionId, f64>,
    pub per_dimension: BTreeMap<DimensionId, f64>,
    pub total: f64,
}

impl ScoreSheet {
    /// Builds a sheet from already normalized question means.
    pub fn from_question_means(
        session_id: impl Into<String>,
        rater_id: impl Into<String>,
        per_question: BTreeMap<QuestionId, f64>,
    ) -> Result<ScoreSheet, AnalysisError> {
        let session_id = session_id.into();
        for q in QuestionId::all() {
            if !per_question.contains_key(&q) {
                return Err(AnalysisError::MissingQuestion {
                    session_id,
                    question: q,
                });
            }
        }
        let per_dimension: BTreeMap<DimensionId, f64> = DimensionId::ALL
            .iter()
            .map(|&d| {
                let vals: Vec<f64> = d.questions().iter().map(|q| per_question[q]).collect();
                (d, mean(&vals).expect("four values"))
            })
            .collect();
        let all: Vec<f64> = per_question.values().copied().collect();
        Ok(ScoreSheet {
            session_id,
            rater_id: rater_id.into(),
            total: mean(&all).expect("twelve values"),
            per_question,
            per_dimension,
        })
    }

    pub fn question(&self, q: QuestionId) -> f64 {
        self.per_question[&q]
    }

    pub fn dimension(&self, d: DimensionId) -> f64 {
        self.per_dimension[&d]
    }
}

/// Averages the normalized scores of one session's records, over runs and
/// annotators alike. The sheet is labelled with the records' rater id, or
/// `pooled` when several raters contributed.
pub fn aggregate(records: &[RatingRecord], rubric: &Rubric) -> Result<ScoreSheet, AnalysisError> {
    let first = records.first().ok_or(AnalysisError::NoRecords)?;
    if let Some(other) = records.iter().find(|r| r.session_id != first.session_id) {
        return Err(AnalysisError::MixedSessions(
            first.session_id.clone(),
            other.session_id.clone(),
        ));
    }
    let raters: BTreeSet<&str> = records.iter().map(|r| r.rater_id.as_str()).collect();
    let label = if raters.len() == 1 {
        first.rater_id.clone()
    } else {
        "pooled".to_string()
    };
    aggregate_as(records, rubric, &label)
}

fn aggregate_as(
    records: &[RatingRecord],
    rubric: &Rubric,
    label: &str,
) -> Result<ScoreSheet, AnalysisError> {
    let session_id = records[0].session_id.clone();
    let mut by_q: BTreeMap<QuestionId, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_q.entry(r.question_id)
            .or_default()
            .push(rubric.normalize(r.question_id, r.raw_score as f64)?);
    }
    let mut means = BTreeMap::new();
    for q in QuestionId::all() {
        let vals = by_q.get(&q).ok_or_else(|| AnalysisError::MissingQuestion {
            session_id: session_id.clone(),
            question: q,
        })?;
        means.insert(q, mean(vals).expect("non-empty"));
    }
    ScoreSheet::from_question_means(session_id, label, means)
}

/// One sheet per session, averaging every record for that session. Use for
/// model runs (mean over runs) and annotator pools (mean over annotators).
pub fn aggregate_by_session(
    records: &[RatingRecord],
    rubric: &Rubric,
    label: &str,
) -> Result<Vec<ScoreSheet>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::NoRecords);
    }
    let mut groups: BTreeMap<&str, Vec<RatingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.session_id).or_default().push(r.clone());
    }
    groups
        .values()
        .map(|g| aggregate_as(g, rubric, label))
        .collect()
}

/// Sheets from a `(session, question) → raw score` map, e.g. a mock's
/// hidden truth.
pub fn sheets_from_raw_scores(
    scores: &HashMap<(String, QuestionId), u8>,
    rubric: &Rubric,
    label: &str,
) -> Result<Vec<ScoreSheet>, AnalysisError> {
    let mut by_session: BTreeMap<&str, BTreeMap<QuestionId, f64>> = BTreeMap::new();
    for ((s, q), &raw) in scores {
        by_session
            .entry(s)
            .or_default()
            .insert(*q, rubric.normalize(*q, raw as f64)?);
    }
    by_session
        .into_iter()
        .map(|(s, m)| ScoreSheet::from_question_means(s, label, m))
        .collect()
}

fn index_sheets(sheets: &[ScoreSheet]) -> Result<BTreeMap<&str, &ScoreSheet>, AnalysisError> {
    let mut map = BTreeMap::new();
    for s in sheets {
        if map.insert(s.session_id.as_str(), s).is_some() {
            return Err(AnalysisError::DuplicateSheet(s.session_id.clone()));
        }
    }
    Ok(map)
}

/// A report with a record form and a text form.
pub trait Report {
    fn kind(&self) -> &'static str;
    fn records(&self) -> Vec<Value>;
    fn render_text(&self) -> String;
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => UNDEFINED.to_string(),
    }
}

fn fmt_with_stars(v: Option<f64>, stars: Option<Significance>) -> String {
    match (v, stars) {
        (Some(x), Some(s)) => format!("{x:.4}{}", s.stars()),
        (Some(x), None) => format!("{x:.4}"),
        (None, _) => UNDEFINED.to_string(),
    }
}

/// Question, dimension or overall row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Question,
    Dimension,
    Overall,
}

/// Labels in table order: each dimension followed by its questions, then
/// the overall row.
fn table_order() -> Vec<(RowKind, String)> {
    let mut out = Vec::new();
    for d in DimensionId::ALL {
        out.push((RowKind::Dimension, d.label().to_string()));
        for q in d.questions() {
            out.push((RowKind::Question, q.to_string()));
        }
    }
    out.push((RowKind::Overall, "Overall".into()));
    out
}

/// Mean of the member values; undefined if any member is.
fn strict_mean(values: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = values.iter().copied().collect();
    mean(&vals?)
}

/// Question values rolled up into dimension means and an overall mean of
/// the dimension values.
fn roll_up(
    per_q: &BTreeMap<QuestionId, Option<f64>>,
) -> (BTreeMap<DimensionId, Option<f64>>, Option<f64>) {
    let dims: BTreeMap<DimensionId, Option<f64>> = DimensionId::ALL
        .iter()
        .map(|&d| {
            let vals: Vec<Option<f64>> = d.questions().iter().map(|q| per_q[q]).collect();
            (d, strict_mean(&vals))
        })
        .collect();
    let overall = strict_mean(&dims.values().copied().collect::<Vec<_>>());
    (dims, overall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub kind: RowKind,
    pub label: String,
    pub icc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// ICC per question with dimension and overall means of the question values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccTable {
    pub title: String,
    pub form: IccForm,
    /// The effects model the table is read under. Both models share the
    /// absolute-agreement point estimate, so this is a label only.
    pub model: String,
    pub n_sessions: usize,
    /// Runs (self-consistency) or raters (inter-rater) per cell.
    pub k: usize,
    pub rows: Vec<IccRow>,
}

impl IccTable {
    pub fn row(&self, label: &str) -> Option<&IccRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn question(&self, q: QuestionId) -> Option<f64> {
        self.row(&q.to_string()).and_then(|r| r.icc)
    }

    pub fn dimension(&self, d: DimensionId) -> Option<f64> {
        self.row(d.label()).and_then(|r| r.icc)
    }

    pub fn overall(&self) -> Option<f64> {
        self.row("Overall").and_then(|r| r.icc)
    }
}

impl Report for IccTable {
    fn kind(&self) -> &'static str {
        "consistency"
    }

    fn records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                json!({
                    "report": self.kind(),
                    "title": self.title,
                    "form": self.form,
                    "model": self.model,
                    "row_kind": r.kind,
                    "label": r.label,
                    "icc": r.icc,
                    "note": r.note,
                    "n_sessions": self.n_sessions,
                    "k": self.k,
                })
            })
            .collect()
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let form = match self.form {
            IccForm::AverageK => "A_k",
            IccForm::Single => "A_1",
        };
        let _ = writeln!(
            out,
            "{} (ICC {form}, {} sessions x {})",
            self.title, self.n_sessions, self.k
        );
        let _ = writeln!(out, "Model: {}", self.model);
        let _ = writeln!(out, "{:<18}{:>10}", "", "ICC");
        for r in &self.rows {
            let label = match r.kind {
                RowKind::Question => format!("  {}", r.label),
                _ => r.label.clone(),
            };
            let _ = write!(out, "{label:<18}{:>10}", fmt_opt(r.icc, 4));
            if let Some(note) = &r.note {
                let _ = write!(out, "  ({note})");
            }
            out.push('\n');
        }
        out
    }
}

pub const SELF_CONSISTENCY_MODEL: &str = "two-way mixed effects, absolute agreement";
pub const INTER_RATER_MODEL: &str = "two-way random effects, absolute agreement";

fn icc_table(
    title: &str,
    model: &str,
    form: IccForm,
    n: usize,
    k: usize,
    matrices: BTreeMap<QuestionId, RatingMatrix>,
) -> IccTable {
    let mut per_q = BTreeMap::new();
    let mut notes = BTreeMap::new();
    for (q, m) in &matrices {
        match icc(m, form) {
            Ok(res) => {
                per_q.insert(*q, Some(res.icc));
            }
            Err(e) => {
                per_q.insert(*q, None);
                notes.insert(*q, e.to_string());
            }
        }
    }
    let (dims, overall) = roll_up(&per_q);
    let rows = table_order()
        .into_iter()
        .map(|(kind, label)| {
            let (icc, note) = match kind {
                RowKind::Question => {
                    let q: QuestionId = label.parse().expect("table label");
                    (per_q[&q], notes.get(&q).cloned())
                }
                RowKind::Dimension => {
                    let d = DimensionId::ALL
                        .into_iter()
                        .find(|d| d.label() == label)
                        .expect("table label");
                    (dims[&d], None)
                }
                RowKind::Overall => (overall, None),
            };
            IccRow {
                kind,
                label,
                icc,
                note,
            }
        })
        .collect();
    IccTable {
        title: title.to_string(),
        form,
        model: model.to_string(),
        n_sessions: n,
        k,
        rows,
    }
}

type Cells<'a> = BTreeMap<(&'a str, QuestionId), Vec<&'a RatingRecord>>;

fn cells(records: &[RatingRecord]) -> (BTreeSet<&str>, Cells<'_>) {
    let mut sessions = BTreeSet::new();
    let mut cells: Cells<'_> = BTreeMap::new();
    for r in records {
        sessions.insert(r.session_id.as_str());
        cells
            .entry((&r.session_id, r.question_id))
            .or_default()
            .push(r);
    }
    (sessions, cells)
}

/// Intra-rater agreement across repeated runs: for each question, the
/// average-measures ICC of the sessions × runs matrix.
pub fn self_consistency(
    records: &[RatingRecord],
    rubric: &Rubric,
) -> Result<IccTable, AnalysisError> {
    let (sessions, cells) = cells(records);
    if sessions.len() < 2 {
        return Err(AnalysisError::InsufficientData {
            what: "sessions for self-consistency",
            needed: 2,
            got: sessions.len(),
        });
    }
    let mut k = None;
    let mut matrices = BTreeMap::new();
    for q in QuestionId::all() {
        let mut values = Vec::new();
        for &s in &sessions {
            let mut runs =
                cells
                    .get(&(s, q))
                    .cloned()
                    .ok_or_else(|| AnalysisError::MissingQuestion {
                        session_id: s.to_string(),
                        question: q,
                    })?;
            let expected = *k.get_or_insert(runs.len());
            if runs.len() != expected {
                return Err(AnalysisError::RunCountMismatch {
                    session_id: s.to_string(),
                    question: q,
                    expected,
                    found: runs.len(),
                });
            }
            runs.sort_by_key(|r| r.run_index);
            for r in runs {
                values.push(rubric.normalize(q, r.raw_score as f64)?);
            }
        }
        let k = k.expect("set above");
        if k < 2 {
            return Err(AnalysisError::InsufficientData {
                what: "runs per session for self-consistency",
                needed: 2,
                got: k,
            });
        }
        matrices.insert(q, RatingMatrix::from_flat(sessions.len(), k, values)?);
    }
    Ok(icc_table(
        "Self-consistency across runs",
        SELF_CONSISTENCY_MODEL,
        IccForm::AverageK,
        sessions.len(),
        k.unwrap_or_default(),
        matrices,
    ))
}

/// Agreement among annotators: for each question, the average-measures ICC
/// of the sessions × raters matrix. A rater's repeated runs on a cell are
/// averaged first.
pub fn inter_rater_consistency(
    records: &[RatingRecord],
    rubric: &Rubric,
) -> Result<IccTable, AnalysisError> {
    let (sessions, cells) = cells(records);
    let raters: Vec<String> = records
        .iter()
        .map(|r| r.rater_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if sessions.len() < 2 || raters.len() < 2 {
        return Err(AnalysisError::InsufficientData {
            what: "sessions and raters for inter-rater agreement",
            needed: 2,
            got: sessions.len().min(raters.len()),
        });
    }
    let mut matrices = BTreeMap::new();
    for q in QuestionId::all() {
        let mut values = Vec::new();
        for &s in &sessions {
            let recs = cells
                .get(&(s, q))
                .ok_or_else(|| AnalysisError::MissingQuestion {
                    session_id: s.to_string(),
                    question: q,
                })?;
            let mut by_rater: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for r in recs {
                by_rater
                    .entry(&r.rater_id)
                    .or_default()
                    .push(rubric.normalize(q, r.raw_score as f64)?);
            }
            if by_rater.len() != raters.len() {
                return Err(AnalysisError::RaterMismatch {
                    session_id: s.to_string(),
                    question: q,
                    expected: raters.clone(),
                    found: by_rater.keys().map(|k| k.to_string()).collect(),
                });
            }
            values.extend(by_rater.values().map(|v| mean(v).expect("non-empty")));
        }
        matrices.insert(
            q,
            RatingMatrix::from_flat(sessions.len(), raters.len(), values)?,
        );
    }
    Ok(icc_table(
        "Inter-rater agreement",
        INTER_RATER_MODEL,
        IccForm::AverageK,
        sessions.len(),
        raters.len(),
        matrices,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub kind: RowKind,
    pub label: String,
    pub r: Option<f64>,
    /// Only question rows carry a p-value and significance.
    pub p: Option<f64>,
    pub significance: Option<Significance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Pearson correlation of model against human scores per question.
/// Dimension rows average their question correlations and the overall row
/// averages the dimension values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub model: String,
    pub reference: String,
    pub n_sessions: usize,
    pub rows: Vec<AlignmentRow>,
}

impl AlignmentReport {
    pub fn row(&self, label: &str) -> Option<&AlignmentRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn question(&self, q: QuestionId) -> Option<f64> {
        self.row(&q.to_string()).and_then(|r| r.r)
    }

    pub fn dimension(&self, d: DimensionId) -> Option<f64> {
        self.row(d.label()).and_then(|r| r.r)
    }

    pub fn overall(&self) -> Option<f64> {
        self.row("Overall").and_then(|r| r.r)
    }
}

/// Rolls question correlations up into dimension and overall rows.
pub fn alignment_from_question_r(
    per_question: &BTreeMap<QuestionId, Option<f64>>,
) -> (BTreeMap<DimensionId, Option<f64>>, Option<f64>) {
    roll_up(per_question)
}

pub fn alignment(
    model: &[ScoreSheet],
    human: &[ScoreSheet],
) -> Result<AlignmentReport, AnalysisError> {
    let m = index_sheets(model)?;
    let h = index_sheets(human)?;
    let common: Vec<&str> = m.keys().filter(|s| h.contains_key(*s)).copied().collect();
    if common.len() < 3 {
        return Err(AnalysisError::InsufficientData {
            what: "sessions rated by both model and humans",
            needed: 3,
            got: common.len(),
        });
    }
    let mut per_q = BTreeMap::new();
    let mut detail = BTreeMap::new();
    for q in QuestionId::all() {
        let x: Vec<f64> = common.iter().map(|s| m[s].question(q)).collect();
        let y: Vec<f64> = common.iter().map(|s| h[s].question(q)).collect();
        match pearson(&x, &y) {
            Ok(c) => {
                per_q.insert(q, Some(c.r));
                detail.insert(q, (Some(c.p), Some(significance_stars(c.p)), None));
            }
            Err(e) => {
                per_q.insert(q, None);
                detail.insert(q, (None, None, Some(e.to_string())));
            }
        }
    }
    let (dims, overall) = roll_up(&per_q);
    let rows = table_order()
        .into_iter()
        .map(|(kind, label)| match kind {
            RowKind::Question => {
                let q: QuestionId = label.parse().expect("table label");
                let (p, significance, note) = detail[&q].clone();
                AlignmentRow {
                    kind,
                    label,
                    r: per_q[&q],
                    p,
                    significance,
                    note,
                }
            }
            RowKind::Dimension => {
                let d = DimensionId::ALL
                    .into_iter()
                    .find(|d| d.label() == label)
                    .expect("table label");
                AlignmentRow {
                    kind,
                    label,
                    r: dims[&d],
                    p: None,
                    significance: None,
                    note: None,
                }
            }
            RowKind::Overall => AlignmentRow {
                kind,
                label,
                r: overall,
                p: None,
                significance: None,
                note: None,
            },
        })
        .collect();
    Ok(AlignmentReport {
        model: model[0].rater_id.clone(),
        reference: human[0].rater_id.clone(),
        n_sessions: common.len(),
        rows,
    })
}

impl Report for AlignmentReport {
    fn kind(&self) -> &'static str {
        "alignment"
    }

    fn records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                json!({
                    "report": self.kind(),
                    "model": self.model,
                    "reference": self.reference,
                    "row_kind": r.kind,
                    "label": r.label,
                    "r": r.r,
                    "p": r.p,
                    "significance": r.significance,
                    "note": r.note,
                    "n_sessions": self.n_sessions,
                })
            })
            .collect()
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Alignment of {} with {} (Pearson r, {} sessions)",
            self.model, self.reference, self.n_sessions
        );
        let _ = writeln!(out, "{:<18}{:>12}{:>12}", "", "r", "p");
        for r in &self.rows {
            let label = match r.kind {
                RowKind::Question => format!("  {}", r.label),
                _ => r.label.clone(),
            };
            let p = match r.kind {
                RowKind::Question => fmt_opt(r.p, 4),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "{label:<18}{:>12}{p:>12}",
                fmt_with_stars(r.r, r.significance)
            );
        }
        out.push_str("Dimension rows average question r; Overall averages dimension rows.\n");
        out.push_str("*** p < 0.001, ** p < 0.01, * p < 0.05\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub kind: RowKind,
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; undefined for a single sheet.
    pub sd: Option<f64>,
    pub histogram: [usize; HISTOGRAM_BINS],
}

pub const HISTOGRAM_BINS: usize = 8;

/// Bin index for a score on `[1, 5]` in bins of width 0.5; 5.0 lands in the
/// last bin.
pub fn histogram_bin(score: f64) -> Option<usize> {
    if !(1.0..=5.0).contains(&score) {
        return None;
    }
    Some((((score - 1.0) / 0.5).floor() as usize).min(HISTOGRAM_BINS - 1))
}

pub fn histogram_edges() -> [f64; HISTOGRAM_BINS + 1] {
    std::array::from_fn(|i| 1.0 + 0.5 * i as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n_sheets: usize,
    pub rows: Vec<DistributionRow>,
}

impl Distribution {
    pub fn row(&self, label: &str) -> Option<&DistributionRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Mean, sample sd and histogram for each question, each dimension and the
/// total, over sheets.
pub fn descriptive_distribution(sheets: &[ScoreSheet]) -> Result<Distribution, AnalysisError> {
    if sheets.is_empty() {
        return Err(AnalysisError::InsufficientData {
            what: "score sheets",
            needed: 1,
            got: 0,
        });
    }
    let row = |kind: RowKind, label: String, vals: Vec<f64>| {
        let mut histogram = [0; HISTOGRAM_BINS];
        for v in &vals {
            if let Some(b) = histogram_bin(*v) {
                histogram[b] += 1;
            }
        }
        DistributionRow {
            kind,
            label,
            n: vals.len(),
            mean: mean(&vals).expect("non-empty"),
            sd: sample_sd(&vals),
            histogram,
        }
    };
    let mut rows = Vec::new();
    for (kind, label) in table_order() {
        let vals: Vec<f64> = match kind {
            RowKind::Question => {
                let q: QuestionId = label.parse().expect("table label");
                sheets.iter().map(|s| s.question(q)).collect()
            }
            RowKind::Dimension => {
                let d = DimensionId::ALL
                    .into_iter()
                    .find(|d| d.label() == label)
                    .expect("table label");
                sheets.iter().map(|s| s.dimension(d)).collect()
            }
            RowKind::Overall => sheets.iter().map(|s| s.total).collect(),
        };
        let label = if kind == RowKind::Overall {
            "Total".to_string()
        } else {
            label
        };
        rows.push(row(kind, label, vals));
    }
    Ok(Distribution {
        n_sheets: sheets.len(),
        rows,
    })
}

impl Report for Distribution {
    fn kind(&self) -> &'static str {
        "distribution"
    }

    fn records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                json!({
                    "report": self.kind(),
                    "row_kind": r.kind,
                    "label": r.label,
                    "n": r.n,
                    "mean": r.mean,
                    "sd": r.sd,
                    "bin_edges": histogram_edges(),
                    "histogram": r.histogram,
                })
            })
            .collect()
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Score distribution over {} sheets", self.n_sheets);
        let _ = write!(out, "{:<18}{:>8}{:>8}  ", "", "mean", "sd");
        let edges = histogram_edges();
        let bins: Vec<String> = (0..HISTOGRAM_BINS)
            .map(|i| format!("{:.1}-{:.1}", edges[i], edges[i + 1]))
            .collect();
        let _ = writeln!(
            out,
            "{}",
            bins.iter().map(|b| format!("{b:>8}")).collect::<String>()
        );
        for r in &self.rows {
            let label = match r.kind {
                RowKind::Question => format!("  {}", r.label),
                _ => r.label.clone(),
            };
            let sd =
                r.sd.map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| NO_SD.to_string());
            let hist: String = r.histogram.iter().map(|c| format!("{c:>8}")).collect();
            let _ = writeln!(out, "{label:<18}{:>8.2}{sd:>8}  {hist}", r.mean);
        }
        out
    }
}

/// Years-of-experience band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperienceTier {
    /// Two years or less.
    Primary,
    /// Three to eight years.
    Intermediate,
    /// Ten years or more; nine years is also placed here.
    Advanced,
}

impl ExperienceTier {
    pub const ALL: [ExperienceTier; 3] = [
        ExperienceTier::Primary,
        ExperienceTier::Intermediate,
        ExperienceTier::Advanced,
    ];

    pub fn from_years(years: u32) -> ExperienceTier {
        match years {
            0..=2 => ExperienceTier::Primary,
            3..=8 => ExperienceTier::Intermediate,
            _ => ExperienceTier::Advanced,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExperienceTier::Primary => "primary",
            ExperienceTier::Intermediate => "intermediate",
            ExperienceTier::Advanced => "advanced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounselorMeta {
    pub counselor_id: String,
    pub years_experience: u32,
}

/// Reads `{counselor_id, years_experience}` lines.
pub fn read_counselor_meta<R: BufRead>(reader: R) -> Result<Vec<CounselorMeta>, AnalysisError> {
    read_jsonl(reader)
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(
    reader: R,
) -> Result<Vec<T>, AnalysisError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AnalysisError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| AnalysisError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Reads `{session_id, question_id, score}` lines into a raw score map.
pub fn read_raw_scores<R: BufRead>(
    reader: R,
) -> Result<HashMap<(String, QuestionId), u8>, AnalysisError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        session_id: String,
        question_id: QuestionId,
        score: u8,
    }
    let lines: Vec<Line> = read_jsonl(reader)?;
    let mut out = HashMap::new();
    for (i, l) in lines.into_iter().enumerate() {
        if !(1..=5).contains(&l.score) {
            return Err(AnalysisError::Malformed {
                line: i + 1,
                message: format!("score {} outside 1..5", l.score),
            });
        }
        if out
            .insert((l.session_id.clone(), l.question_id), l.score)
            .is_some()
        {
            return Err(AnalysisError::Malformed {
                line: i + 1,
                message: format!("duplicate entry for {}/{}", l.session_id, l.question_id),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounselorSummary {
    pub counselor_id: String,
    pub years_experience: u32,
    pub tier: ExperienceTier,
    pub n_sessions: usize,
    /// Session-weighted means.
    pub per_dimension: BTreeMap<DimensionId, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub tier: ExperienceTier,
    pub counselor_ids: Vec<String>,
    /// Means of counselor means; `None` for a tier without counselors.
    pub per_dimension: BTreeMap<DimensionId, Option<f64>>,
    pub total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p: Option<f64>,
    pub significance: Option<Significance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceReport {
    pub counselors: Vec<CounselorSummary>,
    pub tiers: Vec<TierSummary>,
    /// Welch t-tests of session totals for every counselor pair `a < b`.
    pub pairs: Vec<PairwiseTest>,
    pub warnings: Vec<String>,
}

impl ExperienceReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairwiseTest> {
        self.pairs
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
    }
}

/// Session totals per counselor, grouped into experience tiers, with
/// pairwise Welch t-tests.
pub fn experience_comparison(
    sheets: &[ScoreSheet],
    sessions: &SessionSet,
    meta: &[CounselorMeta],
) -> Result<ExperienceReport, AnalysisError> {
    let years: BTreeMap<&str, u32> = meta
        .iter()
        .map(|m| (m.counselor_id.as_str(), m.years_experience))
        .collect();
    let mut by_counselor: BTreeMap<&str, Vec<&ScoreSheet>> = BTreeMap::new();
    for sheet in index_sheets(sheets)?.values() {
        let session = sessions
            .get(&sheet.session_id)
            .ok_or_else(|| AnalysisError::UnknownSession(sheet.session_id.clone()))?;
        by_counselor
            .entry(&session.counselor_id)
            .or_default()
            .push(sheet);
    }
    let mut warnings = Vec::new();
    let mut counselors = Vec::new();
    let mut totals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, group) in by_counselor {
        let Some(&y) = years.get(id) else {
            warnings.push(format!(
                "counselor {id} excluded: no years-of-experience metadata"
            ));
            continue;
        };
        if group.len() < 2 {
            warnings.push(format!(
                "counselor {id} excluded: {} scored session(s), need at least 2",
                group.len()
            ));
            continue;
        }
        let t: Vec<f64> = group.iter().map(|s| s.total).collect();
        counselors.push(CounselorSummary {
            counselor_id: id.to_string(),
            years_experience: y,
            tier: ExperienceTier::from_years(y),
            n_sessions: group.len(),
            per_dimension: DimensionId::ALL
                .iter()
                .map(|&d| {
                    let v: Vec<f64> = group.iter().map(|s| s.dimension(d)).collect();
                    (d, mean(&v).expect("non-empty"))
                })
                .collect(),
            total: mean(&t).expect("non-empty"),
        });
        totals.insert(id.to_string(), t);
    }
    if counselors.is_empty() {
        return Err(AnalysisError::InsufficientData {
            what: "counselors with metadata and two or more sessions",
            needed: 1,
            got: 0,
        });
    }
    let tiers = ExperienceTier::ALL
        .iter()
        .map(|&tier| {
            let members: Vec<&CounselorSummary> =
                counselors.iter().filter(|c| c.tier == tier).collect();
            TierSummary {
                tier,
                counselor_ids: members.iter().map(|c| c.counselor_id.clone()).collect(),
                per_dimension: DimensionId::ALL
                    .iter()
                    .map(|&d| {
                        let v: Vec<f64> = members.iter().map(|c| c.per_dimension[&d]).collect();
                        (d, mean(&v))
                    })
                    .collect(),
                total: mean(&members.iter().map(|c| c.total).collect::<Vec<_>>()),
            }
        })
        .collect();
    let ids: Vec<&String> = totals.keys().collect();
    let mut pairs = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let test = welch_t(&totals[*a], &totals[*b]).ok();
            pairs.push(PairwiseTest {
                a: a.to_string(),
                b: b.to_string(),
                t: test.map(|t| t.t),
                df: test.map(|t| t.df),
                p: test.map(|t| t.p),
                significance: test.map(|t| significance_stars(t.p)),
            });
        }
    }
    Ok(ExperienceReport {
        counselors,
        tiers,
        pairs,
        warnings,
    })
}

impl Report for ExperienceReport {
    fn kind(&self) -> &'static str {
        "experience"
    }

    fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for c in &self.counselors {
            out.push(json!({"report": self.kind(), "record": "counselor", "counselor": c}));
        }
        for t in &self.tiers {
            out.push(json!({"report": self.kind(), "record": "tier", "tier": t}));
        }
        for p in &self.pairs {
            out.push(json!({"report": self.kind(), "record": "pair", "test": p}));
        }
        for w in &self.warnings {
            out.push(json!({"report": self.kind(), "record": "warning", "message": w}));
        }
        out
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("Counselor means (sessions weighted equally)\n");
        let _ = writeln!(
            out,
            "{:<14}{:<14}{:>6}{:>10}{:>10}{:>16}{:>10}",
            "counselor", "tier", "n", "Goal", "Approach", "Affective Bond", "Total"
        );
        for c in &self.counselors {
            let _ = writeln!(
                out,
                "{:<14}{:<14}{:>6}{:>10.2}{:>10.2}{:>16.2}{:>10.2}",
                c.counselor_id,
                c.tier.label(),
                c.n_sessions,
                c.per_dimension[&DimensionId::Goal],
                c.per_dimension[&DimensionId::Approach],
                c.per_dimension[&DimensionId::AffectiveBond],
                c.total
            );
        }
        out.push_str("\nTier means (counselors weighted equally)\n");
        for t in &self.tiers {
            let _ = writeln!(
                out,
                "{:<14}{:<14}{:>6}{:>10}{:>10}{:>16}{:>10}",
                t.tier.label(),
                "",
                t.counselor_ids.len(),
                fmt_opt(t.per_dimension[&DimensionId::Goal], 2),
                fmt_opt(t.per_dimension[&DimensionId::Approach], 2),
                fmt_opt(t.per_dimension[&DimensionId::AffectiveBond], 2),
                fmt_opt(t.total, 2)
            );
        }
        out.push_str("\nPairwise Welch t-tests on session totals\n");
        let _ = writeln!(
            out,
            "{:<14}{:<14}{:>10}{:>10}{:>12}{:>6}",
            "a", "b", "t", "df", "p", "sig"
        );
        for p in &self.pairs {
            let sig = p
                .significance
                .map(|s| s.to_string())
                .unwrap_or_else(|| UNDEFINED.into());
            let _ = writeln!(
                out,
                "{:<14}{:<14}{:>10}{:>10}{:>12}{:>6}",
                p.a,
                p.b,
                fmt_opt(p.t, 3),
                fmt_opt(p.df, 2),
                fmt_opt(p.p, 6),
                sig
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Early,
    Middle,
    Late,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Early, Phase::Middle, Phase::Late];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Early => "early",
            Phase::Middle => "middle",
            Phase::Late => "late",
        }
    }
}

/// Splits `n` ordered sessions at `⌊n/3⌋` and `⌊2n/3⌋`; the late phase
/// takes the remainder.
pub fn phase_bounds(n: usize) -> [Range<usize>; 3] {
    let (a, b) = (n / 3, 2 * n / 3);
    [0..a, a..b, b..n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeans {
    pub phase: Phase,
    pub session_ids: Vec<String>,
    pub per_dimension: BTreeMap<DimensionId, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrend {
    pub counselor_id: String,
    pub client_id: String,
    pub n_sessions: usize,
    pub phases: Vec<PhaseMeans>,
}

impl PairTrend {
    fn total(&self, phase: Phase) -> f64 {
        self.phases[phase as usize].total
    }

    /// Late total at or below early total at two-decimal precision.
    pub fn declined_or_unchanged(&self) -> bool {
        round2(self.total(Phase::Late)) <= round2(self.total(Phase::Early))
    }

    /// Late total at least one scale point above early total.
    pub fn improved_one_level(&self) -> bool {
        round2(self.total(Phase::Late) - self.total(Phase::Early)) >= 1.0
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPhase {
    pub phase: Phase,
    /// Means over pairs, each pair weighted equally.
    pub per_dimension: BTreeMap<DimensionId, Option<f64>>,
    pub total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrend {
    pub pairs: Vec<PairTrend>,
    pub corpus: Vec<CorpusPhase>,
    pub declined_or_unchanged: usize,
    pub improved_one_level: usize,
    pub warnings: Vec<String>,
}

impl PhaseTrend {
    pub fn decline_or_no_change_share(&self) -> Option<f64> {
        (!self.pairs.is_empty())
            .then(|| self.declined_or_unchanged as f64 / self.pairs.len() as f64)
    }

    pub fn improved_share(&self) -> Option<f64> {
        (!self.pairs.is_empty()).then(|| self.improved_one_level as f64 / self.pairs.len() as f64)
    }
}

/// Early/middle/late means per counselor–client pair, ordered by
/// `sequence_no`. Pairs with fewer than three scored sessions are excluded.
pub fn phase_trend(
    sheets: &[ScoreSheet],
    sessions: &SessionSet,
) -> Result<PhaseTrend, AnalysisError> {
    let index = index_sheets(sheets)?;
    for id in index.keys() {
        if sessions.get(id).is_none() {
            return Err(AnalysisError::UnknownSession(id.to_string()));
        }
    }
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    for ((counselor, client), group) in sessions.pairs() {
        let mut scored: Vec<(u32, &ScoreSheet)> = group
            .iter()
            .filter_map(|s| {
                index
                    .get(s.session_id.as_str())
                    .map(|sh| (s.sequence_no, *sh))
            })
            .collect();
        if scored.is_empty() {
            continue;
        }
        if scored.len() < 3 {
            warnings.push(format!(
                "pair {counselor}/{client} excluded: {} scored session(s), need at least 3",
                scored.len()
            ));
            continue;
        }
        scored.sort_by_key(|(seq, _)| *seq);
        let n = scored.len();
        let phases = phase_bounds(n)
            .into_iter()
            .zip(Phase::ALL)
            .map(|(range, phase)| {
                let part = &scored[range];
                PhaseMeans {
                    phase,
                    session_ids: part.iter().map(|(_, s)| s.session_id.clone()).collect(),
                    per_dimension: DimensionId::ALL
                        .iter()
                        .map(|&d| {
                            let v: Vec<f64> = part.iter().map(|(_, s)| s.dimension(d)).collect();
                            (d, mean(&v).expect("non-empty phase"))
                        })
                        .collect(),
                    total: mean(&part.iter().map(|(_, s)| s.total).collect::<Vec<_>>())
                        .expect("non-empty phase"),
                }
            })
            .collect();
        pairs.push(PairTrend {
            counselor_id: counselor,
            client_id: client,
            n_sessions: n,
            phases,
        });
    }
    let corpus = Phase::ALL
        .iter()
        .map(|&phase| CorpusPhase {
            phase,
            per_dimension: DimensionId::ALL
                .iter()
                .map(|&d| {
                    let v: Vec<f64> = pairs
                        .iter()
                        .map(|p| p.phases[phase as usize].per_dimension[&d])
                        .collect();
                    (d, mean(&v))
                })
                .collect(),
            total: mean(&pairs.iter().map(|p| p.total(phase)).collect::<Vec<_>>()),
        })
        .collect();
    Ok(PhaseTrend {
        declined_or_unchanged: pairs.iter().filter(|p| p.declined_or_unchanged()).count(),
        improved_one_level: pairs.iter().filter(|p| p.improved_one_level()).count(),
        pairs,
        corpus,
        warnings,
    })
}

impl Report for PhaseTrend {
    fn kind(&self) -> &'static str {
        "phases"
    }

    fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for p in &self.pairs {
            out.push(json!({
                "report": self.kind(),
                "record": "pair",
                "pair": p,
                "declined_or_unchanged": p.declined_or_unchanged(),
                "improved_one_level": p.improved_one_level(),
            }));
        }
        for c in &self.corpus {
            out.push(json!({"report": self.kind(), "record": "corpus", "phase": c}));
        }
        out.push(json!({
            "report": self.kind(),
            "record": "summary",
            "pairs": self.pairs.len(),
            "declined_or_unchanged": self.declined_or_unchanged,
            "improved_one_level": self.improved_one_level,
            "decline_or_no_change_share": self.decline_or_no_change_share(),
            "improved_share": self.improved_share(),
        }));
        for w in &self.warnings {
            out.push(json!({"report": self.kind(), "record": "warning", "message": w}));
        }
        out
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let header = format!(
            "{:<24}{:<8}{:>4}{:>10}{:>10}{:>16}{:>10}\n",
            "pair", "phase", "n", "Goal", "Approach", "Affective Bond", "Total"
        );
        out.push_str("Alliance by counseling phase\n");
        out.push_str(&header);
        for p in &self.pairs {
            for ph in &p.phases {
                let _ = writeln!(
                    out,
                    "{:<24}{:<8}{:>4}{:>10.2}{:>10.2}{:>16.2}{:>10.2}",
                    format!("{}/{}", p.counselor_id, p.client_id),
                    ph.phase.label(),
                    ph.session_ids.len(),
                    ph.per_dimension[&DimensionId::Goal],
                    ph.per_dimension[&DimensionId::Approach],
                    ph.per_dimension[&DimensionId::AffectiveBond],
                    ph.total
                );
            }
        }
        out.push_str("\nCorpus (pairs weighted equally)\n");
        for c in &self.corpus {
            let _ = writeln!(
                out,
                "{:<24}{:<8}{:>4}{:>10}{:>10}{:>16}{:>10}",
                "all",
                c.phase.label(),
                self.pairs.len(),
                fmt_opt(c.per_dimension[&DimensionId::Goal], 2),
                fmt_opt(c.per_dimension[&DimensionId::Approach], 2),
                fmt_opt(c.per_dimension[&DimensionId::AffectiveBond], 2),
                fmt_opt(c.total, 2)
            );
        }
        let _ = writeln!(
            out,
            "\nDecline or no change (late <= early total, 2 dp): {} of {} pairs",
            self.declined_or_unchanged,
            self.pairs.len()
        );
        let _ = writeln!(
            out,
            "Improved by one level (late - early >= 1.0 on the 1-5 total, an interpretation): {} of {} pairs",
            self.improved_one_level,
            self.pairs.len()
        );
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCell {
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub significance: Option<Significance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub label: String,
    pub cells: Vec<OutcomeCell>,
}

/// Rows Goal, Approach, Affective Bond, Total against the four outcome
/// aspects in their declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMatrix {
    pub n_sessions: usize,
    pub aspects: Vec<String>,
    pub rows: Vec<OutcomeRow>,
}

impl OutcomeMatrix {
    pub fn cell(&self, row: &str, aspect: &str) -> Option<&OutcomeCell> {
        let col = self.aspects.iter().position(|a| a == aspect)?;
        self.rows
            .iter()
            .find(|r| r.label == row)
            .map(|r| &r.cells[col])
    }
}

/// Pearson correlations between alliance scores and the outcome ratings
/// stored on the same sessions.
pub fn outcome_correlation(
    sheets: &[ScoreSheet],
    sessions: &SessionSet,
) -> Result<OutcomeMatrix, AnalysisError> {
    let index = index_sheets(sheets)?;
    let mut paired: Vec<(&ScoreSheet, OutcomeRecord)> = Vec::new();
    for (id, sheet) in &index {
        let session = sessions
            .get(id)
            .ok_or_else(|| AnalysisError::UnknownSession(id.to_string()))?;
        if let Some(ors) = session.ors {
            paired.push((sheet, ors));
        }
    }
    if paired.len() < 3 {
        return Err(AnalysisError::InsufficientData {
            what: "scored sessions carrying outcome ratings",
            needed: 3,
            got: paired.len(),
        });
    }
    let mut rows = Vec::new();
    let row_values: Vec<(String, Vec<f64>)> = DimensionId::ALL
        .iter()
        .map(|&d| {
            (
                d.label().to_string(),
                paired.iter().map(|(s, _)| s.dimension(d)).collect(),
            )
        })
        .chain(std::iter::once((
            "Total".to_string(),
            paired.iter().map(|(s, _)| s.total).collect(),
        )))
        .collect();
    for (label, x) in row_values {
        let cells = (0..4)
            .map(|a| {
                let y: Vec<f64> = paired.iter().map(|(_, o)| o.values()[a]).collect();
                match pearson(&x, &y) {
                    Ok(c) => OutcomeCell {
                        r: Some(c.r),
                        p: Some(c.p),
                        significance: Some(significance_stars(c.p)),
                        note: None,
                    },
                    Err(e) => OutcomeCell {
                        r: None,
                        p: None,
                        significance: None,
                        note: Some(e.to_string()),
                    },
                }
            })
            .collect();
        rows.push(OutcomeRow { label, cells });
    }
    Ok(OutcomeMatrix {
        n_sessions: paired.len(),
        aspects: OutcomeRecord::ASPECTS
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows,
    })
}

impl Report for OutcomeMatrix {
    fn kind(&self) -> &'static str {
        "outcomes"
    }

    fn records(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for row in &self.rows {
            for (aspect, cell) in self.aspects.iter().zip(&row.cells) {
                out.push(json!({
                    "report": self.kind(),
                    "row": row.label,
                    "aspect": aspect,
                    "r": cell.r,
                    "p": cell.p,
                    "significance": cell.significance,
                    "note": cell.note,
                    "n_sessions": self.n_sessions,
                }));
            }
        }
        out
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Alliance vs outcome ratings (Pearson r, {} sessions)",
            self.n_sessions
        );
        let _ = write!(out, "{:<16}", "");
        for a in &self.aspects {
            let _ = write!(out, "{a:>18}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.label);
            for c in &row.cells {
                let _ = write!(out, "{:>18}", fmt_with_stars(c.r, c.significance));
            }
            out.push('\n');
        }
        out.push_str("*** p < 0.001, ** p < 0.01, * p < 0.05\n");
        out
    }
}
