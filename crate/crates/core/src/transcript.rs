//! Counseling transcript ingestion, corpus statistics and dialogue rendering.
//!
//! Transcripts arrive as line-delimited JSON, one session per line:
//!
//! ```json
//! {"session_id":"s1","counselor_id":"c1","client_id":"k1","sequence_no":1,
//!  "utterances":[{"speaker":"counselor","text":"..."}],
//!  "ors":{"physical_mental":60,"relationships":55,"social_life":50,"overall":58}}
//! ```
//!
//! An `ors` block belongs to the session it reports on. Clients fill the
//! outcome scale before the following session, so producers shift it onto
//! the evaluated session before ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("failed to read transcripts: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown speaker role `{speaker}` (allowed: counselor, client)")]
    UnknownSpeaker { line: usize, speaker: String },
    #[error("line {line}: session `{session_id}` has no utterances")]
    EmptySession { line: usize, session_id: String },
    #[error("line {line}: session `{session_id}` utterance {index} has empty text")]
    EmptyUtterance {
        line: usize,
        session_id: String,
        index: usize,
    },
    #[error("line {line}: `{field}` must not be empty")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: sequence_no must be at least 1")]
    InvalidSequence { line: usize },
    #[error("line {line}: ors.{field} = {value} is outside [0, 100]")]
    OrsOutOfRange {
        line: usize,
        field: &'static str,
        value: f64,
    },
    #[error("line {line}: duplicate session id `{session_id}`")]
    DuplicateSessionId { line: usize, session_id: String },
    #[error("duplicate sequence_no {sequence_no} for counselor `{counselor_id}` and client `{client_id}`")]
    DuplicateSequence {
        counselor_id: String,
        client_id: String,
        sequence_no: u32,
    },
    #[error("no sessions")]
    EmptySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Counselor,
    Client,
}

impl Speaker {
    fn parse(s: &str) -> Option<Speaker> {
        if s.eq_ignore_ascii_case("counselor") {
            Some(Speaker::Counselor)
        } else if s.eq_ignore_ascii_case("client") {
            Some(Speaker::Client)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    /// Length in Unicode scalar values.
    pub fn char_length(&self) -> usize {
        self.text.chars().count()
    }
}

/// Client-reported outcome scale, each aspect on 0..=100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeRecord {
    pub physical_mental: f64,
    pub relationships: f64,
    pub social_life: f64,
    pub overall: f64,
}

impl OutcomeRecord {
    pub const ASPECTS: [&'static str; 4] =
        ["physical_mental", "relationships", "social_life", "overall"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.physical_mental,
            self.relationships,
            self.social_life,
            self.overall,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub counselor_id: String,
    pub client_id: String,
    pub sequence_no: u32,
    pub utterances: Vec<Utterance>,
    pub ors: Option<OutcomeRecord>,
}

impl Session {
    pub fn pair(&self) -> (&str, &str) {
        (&self.counselor_id, &self.client_id)
    }
}

/// Sessions ordered by `(counselor_id, client_id, sequence_no)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionSet {
    sessions: Vec<Session>,
    by_id: HashMap<String, usize>,
}

impl SessionSet {
    /// Builds a set, enforcing id and per-pair sequence uniqueness.
    pub fn new(mut sessions: Vec<Session>) -> Result<SessionSet, TranscriptError> {
        sessions.sort_by(|a, b| {
            (&a.counselor_id, &a.client_id, a.sequence_no).cmp(&(
                &b.counselor_id,
                &b.client_id,
                b.sequence_no,
            ))
        });
        for w in sessions.windows(2) {
            if w[0].pair() == w[1].pair() && w[0].sequence_no == w[1].sequence_no {
                return Err(TranscriptError::DuplicateSequence {
                    counselor_id: w[1].counselor_id.clone(),
                    client_id: w[1].client_id.clone(),
                    sequence_no: w[1].sequence_no,
                });
            }
        }
        let mut by_id = HashMap::with_capacity(sessions.len());
        for (i, s) in sessions.iter().enumerate() {
            if by_id.insert(s.session_id.clone(), i).is_some() {
                return Err(TranscriptError::DuplicateSessionId {
                    line: 0,
                    session_id: s.session_id.clone(),
                });
            }
        }
        Ok(SessionSet { sessions, by_id })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Session> {
        self.sessions.iter()
    }

    pub fn get(&self, session_id: &str) -> Option<&Session> {
        self.by_id.get(session_id).map(|&i| &self.sessions[i])
    }

    /// Sessions grouped by counselor–client pair, each group in sequence order.
    pub fn pairs(&self) -> BTreeMap<(String, String), Vec<&Session>> {
        let mut out: BTreeMap<(String, String), Vec<&Session>> = BTreeMap::new();
        for s in &self.sessions {
            out.entry((s.counselor_id.clone(), s.client_id.clone()))
                .or_default()
                .push(s);
        }
        out
    }
}

impl<'a> IntoIterator for &'a SessionSet {
    type Item = &'a Session;
    type IntoIter = std::slice::Iter<'a, Session>;

    fn into_iter(self) -> Self::IntoIter {
        self.sessions.iter()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionLine {
    session_id: String,
    counselor_id: String,
    client_id: String,
    sequence_no: u32,
    utterances: Vec<UtteranceLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ors: Option<OutcomeRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    speaker: String,
    text: String,
}

fn session_from_line(line_no: usize, rec: SessionLine) -> Result<Session, TranscriptError> {
    for (field, value) in [
        ("session_id", &rec.session_id),
        ("counselor_id", &rec.counselor_id),
        ("client_id", &rec.client_id),
    ] {
        if value.trim().is_empty() {
            return Err(TranscriptError::MissingField {
                line: line_no,
                field,
            });
        }
    }
    if rec.sequence_no == 0 {
        return Err(TranscriptError::InvalidSequence { line: line_no });
    }
    if rec.utterances.is_empty() {
        return Err(TranscriptError::EmptySession {
            line: line_no,
            session_id: rec.session_id,
        });
    }
    if let Some(ors) = &rec.ors {
        for (field, value) in OutcomeRecord::ASPECTS.iter().zip(ors.values()) {
            if !(0.0..=100.0).contains(&value) {
                return Err(TranscriptError::OrsOutOfRange {
                    line: line_no,
                    field,
                    value,
                });
            }
        }
    }
    let mut utterances = Vec::with_capacity(rec.utterances.len());
    for (index, u) in rec.utterances.into_iter().enumerate() {
        let speaker =
            Speaker::parse(&u.speaker).ok_or_else(|| TranscriptError::UnknownSpeaker {
                line: line_no,
                speaker: u.speaker.clone(),
            })?;
        if u.text.trim().is_empty() {
            return Err(TranscriptError::EmptyUtterance {
                line: line_no,
                session_id: rec.session_id,
                index,
            });
        }
        utterances.push(Utterance {
            index,
            speaker,
            text: u.text,
        });
    }
    Ok(Session {
        session_id: rec.session_id,
        counselor_id: rec.counselor_id,
        client_id: rec.client_id,
        sequence_no: rec.sequence_no,
        utterances,
        ors: rec.ors,
    })
}

/// Parses one transcript line. `line_no` is 1-based and only used in errors.
pub fn parse_session_line(line_no: usize, line: &str) -> Result<Session, TranscriptError> {
    let rec: SessionLine = serde_json::from_str(line).map_err(|e| TranscriptError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    session_from_line(line_no, rec)
}

/// Reads line-delimited session records. Blank lines are skipped.
pub fn ingest<R: BufRead>(stream: R) -> Result<SessionSet, TranscriptError> {
    let mut sessions = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in stream.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session = parse_session_line(i + 1, &line)?;
        if !seen.insert(session.session_id.clone()) {
            return Err(TranscriptError::DuplicateSessionId {
                line: i + 1,
                session_id: session.session_id,
            });
        }
        sessions.push(session);
    }
    SessionSet::new(sessions)
}

/// Writes sessions in the ingest format, one per line, in set order.
pub fn serialize<W: Write>(set: &SessionSet, mut out: W) -> std::io::Result<()> {
    for s in set {
        let line = SessionLine {
            session_id: s.session_id.clone(),
            counselor_id: s.counselor_id.clone(),
            client_id: s.client_id.clone(),
            sequence_no: s.sequence_no,
            utterances: s
                .utterances
                .iter()
                .map(|u| UtteranceLine {
                    speaker: match u.speaker {
                        Speaker::Counselor => "counselor".into(),
                        Speaker::Client => "client".into(),
                    },
                    text: u.text.clone(),
                })
                .collect(),
            ors: s.ors,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ByRole<T> {
    pub total: T,
    pub counselor: T,
    pub client: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogues: usize,
    pub n_speakers: ByRole<usize>,
    /// `total` is unused: sessions per speaker is only meaningful per role.
    pub avg_sessions_per_speaker: ByRole<f64>,
    pub n_utterances: ByRole<usize>,
    pub avg_utterances_per_dialogue: ByRole<f64>,
    pub avg_chars_per_utterance: ByRole<f64>,
}

pub fn corpus_stats(set: &SessionSet) -> Result<CorpusStats, TranscriptError> {
    if set.is_empty() {
        return Err(TranscriptError::EmptySet);
    }
    let counselors: BTreeSet<&str> = set.iter().map(|s| s.counselor_id.as_str()).collect();
    let clients: BTreeSet<&str> = set.iter().map(|s| s.client_id.as_str()).collect();

    let mut n_utt = ByRole::<usize>::default();
    let mut chars = ByRole::<usize>::default();
    for u in set.iter().flat_map(|s| &s.utterances) {
        let len = u.char_length();
        n_utt.total += 1;
        chars.total += len;
        match u.speaker {
            Speaker::Counselor => {
                n_utt.counselor += 1;
                chars.counselor += len;
            }
            Speaker::Client => {
                n_utt.client += 1;
                chars.client += len;
            }
        }
    }
    let n = set.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(CorpusStats {
        n_dialogues: n,
        n_speakers: ByRole {
            total: counselors.len() + clients.len(),
            counselor: counselors.len(),
            client: clients.len(),
        },
        avg_sessions_per_speaker: ByRole {
            total: 0.0,
            counselor: ratio(n, counselors.len()),
            client: ratio(n, clients.len()),
        },
        n_utterances: n_utt,
        avg_utterances_per_dialogue: ByRole {
            total: ratio(n_utt.total, n),
            counselor: ratio(n_utt.counselor, n),
            client: ratio(n_utt.client, n),
        },
        avg_chars_per_utterance: ByRole {
            total: ratio(chars.total, n_utt.total),
            counselor: ratio(chars.counselor, n_utt.counselor),
            client: ratio(chars.client, n_utt.client),
        },
    })
}

impl CorpusStats {
    /// Aligned text table: header, rule and six statistic rows.
    pub fn render_table(&self) -> String {
        let f2 = |x: f64| format!("{x:.2}");
        let rows: [(&str, String, String, String); 6] = [
            (
                "# Dialogues",
                self.n_dialogues.to_string(),
                "-".into(),
                "-".into(),
            ),
            (
                "# Speakers",
                self.n_speakers.total.to_string(),
                self.n_speakers.counselor.to_string(),
                self.n_speakers.client.to_string(),
            ),
            (
                "# Avg. sessions per speaker",
                "-".into(),
                f2(self.avg_sessions_per_speaker.counselor),
                f2(self.avg_sessions_per_speaker.client),
            ),
            (
                "# Utterances",
                self.n_utterances.total.to_string(),
                self.n_utterances.counselor.to_string(),
                self.n_utterances.client.to_string(),
            ),
            (
                "Avg. utterances per dialogue",
                f2(self.avg_utterances_per_dialogue.total),
                f2(self.avg_utterances_per_dialogue.counselor),
                f2(self.avg_utterances_per_dialogue.client),
            ),
            (
                "Avg. length per utterance",
                f2(self.avg_chars_per_utterance.total),
                f2(self.avg_chars_per_utterance.counselor),
                f2(self.avg_chars_per_utterance.client),
            ),
        ];
        let mut out = String::new();
        let line = |a: &str, b: &str, c: &str, d: &str| format!("{a:<30}{b:>10}{c:>12}{d:>10}\n");
        out.push_str(&line("Category", "Total", "Counselor", "Client"));
        out.push_str(&format!("{}\n", "-".repeat(62)));
        for (a, b, c, d) in &rows {
            out.push_str(&line(a, b, c, d));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingCategory {
    Email,
    Url,
    Phone,
}

impl fmt::Display for FindingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FindingCategory::Email => "email-like",
            FindingCategory::Url => "url-like",
            FindingCategory::Phone => "phone-like",
        })
    }
}

/// A contact-like token that may have survived anonymization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub category: FindingCategory,
    pub utterance_index: usize,
    /// Byte range within the utterance text.
    pub span: Range<usize>,
    pub matched: String,
}

static CONTACT_PATTERNS: LazyLock<[(FindingCategory, Regex); 3]> = LazyLock::new(|| {
    [
        (
            FindingCategory::Email,
            Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)+").unwrap(),
        ),
        (
            FindingCategory::Url,
            Regex::new(r"(?i)\b(?:https?://|www\.)[^\s<>]+").unwrap(),
        ),
        (
            FindingCategory::Phone,
            Regex::new(r"\+?\d(?:[ \-]?\d){6,}").unwrap(),
        ),
    ]
});

/// Flags phone-, email- and URL-like tokens. Advisory only.
///
/// Patterns are tried in the order email, URL, phone; a later match that
/// overlaps an earlier one in the same utterance is dropped.
pub fn anonymization_check(session: &Session) -> Vec<Finding> {
    let mut findings = Vec::new();
    for u in &session.utterances {
        let mut taken: Vec<Range<usize>> = Vec::new();
        let mut local = Vec::new();
        for (category, re) in CONTACT_PATTERNS.iter() {
            for m in re.find_iter(&u.text) {
                let span = m.range();
                if taken
                    .iter()
                    .any(|t| t.start < span.end && span.start < t.end)
                {
                    continue;
                }
                taken.push(span.clone());
                local.push(Finding {
                    category: *category,
                    utterance_index: u.index,
                    span,
                    matched: m.as_str().to_string(),
                });
            }
        }
        local.sort_by_key(|f| f.span.start);
        findings.extend(local);
    }
    findings
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleLabels {
    pub counselor: String,
    pub client: String,
}

impl Default for RoleLabels {
    fn default() -> Self {
        RoleLabels {
            counselor: "Counselor".into(),
            client: "Client".into(),
        }
    }
}

impl RoleLabels {
    pub fn label(&self, speaker: Speaker) -> &str {
        match speaker {
            Speaker::Counselor => &self.counselor,
            Speaker::Client => &self.client,
        }
    }
}

/// One `<Role>: <text>` line per utterance, in index order, joined by `\n`.
pub fn render_dialogue(session: &Session, labels: &RoleLabels) -> String {
    let mut out = String::new();
    for (i, u) in session.utterances.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(labels.label(u.speaker));
        out.push_str(": ");
        out.push_str(&u.text);
    }
    out
}
