//! Per-session feedback documents for counselors, and the counselors'
//! ratings of those documents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{Report, ScoreSheet};
use crate::promptkit::EvalSetting;
use crate::rater::RatingRecord;
use crate::rubric::{DimensionId, QuestionId, Rubric};
use crate::stats::mean;

/// Number of weakest questions called out in a report.
pub const HIGHLIGHTS: usize = 3;
/// Longest evidence excerpt kept, in characters.
pub const EXCERPT_CHARS: usize = 400;

pub const NO_EVIDENCE_NOTICE: &str =
    "No evidence was captured for this session; scores are shown without explanations.";

#[derive(Debug, thiserror::Error)]
pub enum FeedbackError {
    #[error("record {record} belongs to {found}, expected {expected}")]
    Mismatch {
        record: String,
        found: String,
        expected: String,
    },
    #[error("no assessments to summarize")]
    EmptyAssessments,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Word label for a 1..5 alliance level, from the nearest whole score.
pub fn band_label(score: f64) -> &'static str {
    match score.round().clamp(1.0, 5.0) as u8 {
        1 => "very weak",
        2 => "weak",
        3 => "neutral",
        4 => "strong",
        _ => "very strong",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub dimension: DimensionId,
    pub score: f64,
    pub band: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excerpt {
    pub run_index: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionFeedback {
    pub question: QuestionId,
    pub text: String,
    pub score: f64,
    pub evidence: Vec<Excerpt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackProvenance {
    pub rater_id: String,
    pub model: Option<String>,
    pub setting: Option<EvalSetting>,
    pub template_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub report_id: String,
    pub session_id: String,
    pub total: f64,
    pub dimensions: Vec<DimensionScore>,
    pub questions: Vec<QuestionFeedback>,
    /// Lowest normalized question means, ties broken by question number.
    pub highlights: Vec<QuestionId>,
    pub notices: Vec<String>,
    pub provenance: FeedbackProvenance,
}

impl FeedbackReport {
    pub fn question(&self, q: QuestionId) -> &QuestionFeedback {
        &self.questions[q.number() as usize - 1]
    }
}

/// Questions ordered from weakest, ties by question number; first `n`.
pub fn lowest_questions(sheet: &ScoreSheet, n: usize) -> Vec<QuestionId> {
    let mut qs: Vec<(QuestionId, f64)> = sheet.per_question.iter().map(|(q, v)| (*q, *v)).collect();
    qs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    qs.into_iter().take(n).map(|(q, _)| q).collect()
}

fn excerpt(text: &str) -> String {
    let text = text.trim();
    if text.chars().count() <= EXCERPT_CHARS {
        return text.to_string();
    }
    let cut: String = text.chars().take(EXCERPT_CHARS).collect();
    format!("{}…", cut.trim_end())
}

/// Builds the feedback document for one session. `records` must all be for
/// the sheet's session; their evidence becomes the per-question excerpts.
pub fn compose_feedback(
    sheet: &ScoreSheet,
    records: &[RatingRecord],
    rubric: &Rubric,
) -> Result<FeedbackReport, FeedbackError> {
    for r in records {
        if r.session_id != sheet.session_id {
            return Err(FeedbackError::Mismatch {
                record: r.key().to_string(),
                found: r.session_id.clone(),
                expected: sheet.session_id.clone(),
            });
        }
    }
    let mut sorted: Vec<&RatingRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.key());

    let mut evidence: BTreeMap<QuestionId, Vec<Excerpt>> = BTreeMap::new();
    for r in &sorted {
        if let Some(text) = r.evidence.as_deref().filter(|t| !t.trim().is_empty()) {
            let list = evidence.entry(r.question_id).or_default();
            let text = excerpt(text);
            if !list.iter().any(|e| e.text == text) {
                list.push(Excerpt {
                    run_index: r.run_index,
                    text,
                });
            }
        }
    }

    let cot_expected = sorted
        .iter()
        .any(|r| r.provenance.setting.is_some_and(|s| s.cot));
    let mut notices = Vec::new();
    if evidence.is_empty() {
        notices.push(NO_EVIDENCE_NOTICE.to_string());
    } else if cot_expected {
        let missing: Vec<String> = QuestionId::all()
            .filter(|q| !evidence.contains_key(q))
            .map(|q| q.to_string())
            .collect();
        if !missing.is_empty() {
            notices.push(format!("No evidence captured for {}.", missing.join(", ")));
        }
    }

    let first = sorted.first();
    let provenance = FeedbackProvenance {
        rater_id: sheet.rater_id.clone(),
        model: first.and_then(|r| r.provenance.model.clone()),
        setting: first.and_then(|r| r.provenance.setting),
        template_hash: first.and_then(|r| r.provenance.template_hash.clone()),
    };

    Ok(FeedbackReport {
        report_id: format!("{}:{}", sheet.session_id, sheet.rater_id),
        session_id: sheet.session_id.clone(),
        total: sheet.total,
        dimensions: DimensionId::ALL
            .iter()
            .map(|&d| DimensionScore {
                dimension: d,
                score: sheet.dimension(d),
                band: band_label(sheet.dimension(d)).to_string(),
            })
            .collect(),
        questions: QuestionId::all()
            .map(|q| QuestionFeedback {
                question: q,
                text: rubric.question(q).text.clone(),
                score: sheet.question(q),
                evidence: evidence.remove(&q).unwrap_or_default(),
            })
            .collect(),
        highlights: lowest_questions(sheet, HIGHLIGHTS),
        notices,
        provenance,
    })
}

impl FeedbackReport {
    pub fn record(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Working alliance feedback for session {}",
            self.session_id
        );
        out.push_str("Scores run from 1 to 5; higher means a stronger alliance.\n\n");

        out.push_str("Summary\n");
        for d in &self.dimensions {
            let _ = writeln!(
                out,
                "  {:<16}{:>6.2}  {}",
                d.dimension.label(),
                d.score,
                d.band
            );
        }
        let _ = writeln!(
            out,
            "  {:<16}{:>6.2}  {}",
            "Overall",
            self.total,
            band_label(self.total)
        );
        for q in &self.questions {
            let _ = writeln!(
                out,
                "    {:<4}{:>6.2}  {}",
                q.question.to_string(),
                q.score,
                q.text
            );
        }

        out.push_str("\nAreas to strengthen\n");
        for (i, id) in self.highlights.iter().enumerate() {
            let q = self.question(*id);
            let _ = writeln!(
                out,
                "  {}. {} ({:.2}) {}",
                i + 1,
                q.question,
                q.score,
                q.text
            );
            if q.evidence.is_empty() {
                out.push_str("     (no evidence captured)\n");
            }
            for e in &q.evidence {
                let _ = writeln!(
                    out,
                    "     run {}: {}",
                    e.run_index,
                    e.text.replace('\n', " ")
                );
            }
        }
        for n in &self.notices {
            let _ = writeln!(out, "  Note: {n}");
        }

        out.push_str("\nProvenance\n");
        let p = &self.provenance;
        let _ = writeln!(out, "  rater: {}", p.rater_id);
        let _ = writeln!(out, "  model: {}", p.model.as_deref().unwrap_or("unknown"));
        let _ = writeln!(
            out,
            "  setting: {}",
            p.setting
                .map(|s| s.to_string())
                .unwrap_or_else(|| "unknown".into())
        );
        let _ = writeln!(
            out,
            "  template: {}",
            p.template_hash.as_deref().unwrap_or("unknown")
        );
        out
    }
}

/// A counselor's 1..5 ratings of one feedback report: whether it helps them
/// understand the alliance, points to directions for improvement, and makes
/// them willing to adjust.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackAssessment {
    pub counselor_id: String,
    pub report_id: String,
    #[serde(rename = "q1")]
    pub q_understand: u8,
    #[serde(rename = "q2")]
    pub q_directions: u8,
    #[serde(rename = "q3")]
    pub q_willingness: u8,
}

impl FeedbackAssessment {
    pub fn values(&self) -> [u8; 3] {
        [self.q_understand, self.q_directions, self.q_willingness]
    }
}

pub const ASSESSMENT_QUESTIONS: [&str; 3] = [
    "Helps me understand the alliance with my client",
    "Points me to aspects to work on",
    "I would adjust my strategies based on it",
];

/// Reads `{counselor_id, report_id, q1, q2, q3}` lines, each rating 1..5.
pub fn read_assessments<R: BufRead>(reader: R) -> Result<Vec<FeedbackAssessment>, FeedbackError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: FeedbackAssessment =
            serde_json::from_str(&line).map_err(|e| FeedbackError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        if let Some(v) = a.values().into_iter().find(|v| !(1..=5).contains(v)) {
            return Err(FeedbackError::Malformed {
                line: i + 1,
                message: format!("rating {v} outside 1..5"),
            });
        }
        out.push(a);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounselorAssessmentMeans {
    pub counselor_id: String,
    pub n: usize,
    pub means: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentSummary {
    pub counselors: Vec<CounselorAssessmentMeans>,
    /// Mean of the counselor means, counselors weighted equally.
    pub average: [f64; 3],
}

pub fn summarize_assessments(
    assessments: &[FeedbackAssessment],
) -> Result<AssessmentSummary, FeedbackError> {
    if assessments.is_empty() {
        return Err(FeedbackError::EmptyAssessments);
    }
    let mut by: BTreeMap<&str, Vec<&FeedbackAssessment>> = BTreeMap::new();
    for a in assessments {
        by.entry(&a.counselor_id).or_default().push(a);
    }
    let counselors: Vec<CounselorAssessmentMeans> = by
        .into_iter()
        .map(|(id, list)| CounselorAssessmentMeans {
            counselor_id: id.to_string(),
            n: list.len(),
            means: std::array::from_fn(|i| {
                let v: Vec<f64> = list.iter().map(|a| a.values()[i] as f64).collect();
                mean(&v).expect("non-empty")
            }),
        })
        .collect();
    let average = std::array::from_fn(|i| {
        let v: Vec<f64> = counselors.iter().map(|c| c.means[i]).collect();
        mean(&v).expect("non-empty")
    });
    Ok(AssessmentSummary {
        counselors,
        average,
    })
}

impl Report for AssessmentSummary {
    fn kind(&self) -> &'static str {
        "feedback_assessment"
    }

    fn records(&self) -> Vec<Value> {
        (0..3)
            .map(|i| {
                let per: BTreeMap<&str, f64> = self
                    .counselors
                    .iter()
                    .map(|c| (c.counselor_id.as_str(), c.means[i]))
                    .collect();
                json!({
                    "report": self.kind(),
                    "question": i + 1,
                    "text": ASSESSMENT_QUESTIONS[i],
                    "counselor_means": per,
                    "average": self.average[i],
                })
            })
            .collect()
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<4}{:<50}", "No.", "Question");
        for c in &self.counselors {
            let _ = write!(out, "{:>8}", c.counselor_id);
        }
        let _ = writeln!(out, "{:>8}", "Avg.");
        for (i, question) in ASSESSMENT_QUESTIONS.iter().enumerate() {
            let _ = write!(out, "{:<4}{:<50}", i + 1, question);
            for c in &self.counselors {
                let _ = write!(out, "{:>8.2}", c.means[i]);
            }
            let _ = writeln!(out, "{:>8.2}", self.average[i]);
        }
        let _ = write!(out, "{:<4}{:<50}", "", "assessments");
        for c in &self.counselors {
            let _ = write!(out, "{:>8}", c.n);
        }
        out.push('\n');
        out
    }
}
