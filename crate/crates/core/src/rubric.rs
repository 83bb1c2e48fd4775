//! The working-alliance framework: dimensions, questions, score anchors and
//! guideline texts.
//!
//! A rubric is stored as a single TOML document (see `data/rubric.en.toml`)
//! and validated on load. Shape:
//!
//! ```toml
//! language = "en"
//! [scale]            # min = 1, max = 5, neutral = 3
//! [[dimensions]]     # id, label
//! [[questions]]      # id = "Q1", dimension, polarity = "forward" | "reverse", text
//! [general_guidelines]        # "1" .. "5"
//! [detailed_guidelines.Q1]    # "1" .. "5", one table per question
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const DEFAULT_RUBRIC: &str = include_str!("../data/rubric.en.toml");

pub const SCALE_MIN: u8 = 1;
pub const SCALE_MAX: u8 = 5;
pub const NEUTRAL_POINT: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum RubricError {
    #[error("rubric is not well-formed: {0}")]
    Parse(String),
    #[error("failed to read rubric: {0}")]
    Io(#[from] std::io::Error),
    #[error("scale must be 1..5 with neutral 3, found {min}..{max} (neutral {neutral})")]
    Scale { min: i64, max: i64, neutral: i64 },
    #[error("guideline score outside 1..5: {0}")]
    ScoreKey(String),
    #[error("unknown question id: {0}")]
    UnknownQuestion(String),
    #[error("unknown dimension: {0}")]
    UnknownDimension(String),
    #[error("duplicate dimension: {0}")]
    DuplicateDimension(DimensionId),
    #[error("dimension absent: {0}")]
    MissingDimension(DimensionId),
    #[error("duplicate question mapping: {0}")]
    DuplicateQuestion(QuestionId),
    #[error("question absent: {0}")]
    MissingQuestion(QuestionId),
    #[error("{question} belongs to {expected}, not {found}")]
    WrongDimension {
        question: QuestionId,
        expected: DimensionId,
        found: DimensionId,
    },
    #[error("question text empty: {0}")]
    EmptyQuestionText(QuestionId),
    #[error("general guideline absent: {0}")]
    MissingGeneral(u8),
    #[error("detailed guideline absent: {0}/{1}")]
    MissingDetailed(QuestionId, u8),
    #[error("detailed guidelines for unknown question: {0}")]
    UnexpectedDetailed(String),
    #[error("score {0} outside [1, 5]")]
    ScoreOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionId {
    Goal,
    Approach,
    AffectiveBond,
}

impl DimensionId {
    pub const ALL: [DimensionId; 3] = [
        DimensionId::Goal,
        DimensionId::Approach,
        DimensionId::AffectiveBond,
    ];

    /// The four questions measuring this dimension.
    pub fn questions(self) -> [QuestionId; 4] {
        let first = match self {
            DimensionId::Goal => 1,
            DimensionId::Approach => 5,
            DimensionId::AffectiveBond => 9,
        };
        [0, 1, 2, 3].map(|i| QuestionId(first + i))
    }

    pub fn label(self) -> &'static str {
        match self {
            DimensionId::Goal => "Goal",
            DimensionId::Approach => "Approach",
            DimensionId::AffectiveBond => "Affective Bond",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DimensionId::Goal => "goal",
            DimensionId::Approach => "approach",
            DimensionId::AffectiveBond => "affective_bond",
        }
    }
}

impl fmt::Display for DimensionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DimensionId {
    type Err = RubricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "goal" => Ok(DimensionId::Goal),
            "approach" => Ok(DimensionId::Approach),
            "affective_bond" => Ok(DimensionId::AffectiveBond),
            other => Err(RubricError::UnknownDimension(other.to_string())),
        }
    }
}

/// Question identifier `Q1`..`Q12`. Orders numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuestionId(u8);

impl QuestionId {
    pub const COUNT: usize = 12;

    pub fn new(n: u8) -> Option<Self> {
        (1..=Self::COUNT as u8)
            .contains(&n)
            .then_some(QuestionId(n))
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = QuestionId> {
        (1..=Self::COUNT as u8).map(QuestionId)
    }

    /// Dimension assignment fixed by the WAI-O-S layout.
    pub fn dimension(self) -> DimensionId {
        match self.0 {
            1..=4 => DimensionId::Goal,
            5..=8 => DimensionId::Approach,
            _ => DimensionId::AffectiveBond,
        }
    }
}

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

impl FromStr for QuestionId {
    type Err = RubricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || RubricError::UnknownQuestion(s.to_string());
        let digits = s
            .strip_prefix('Q')
            .or_else(|| s.strip_prefix('q'))
            .ok_or_else(unknown)?;
        if digits.is_empty() || digits.len() > 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        digits
            .parse::<u8>()
            .ok()
            .and_then(QuestionId::new)
            .ok_or_else(unknown)
    }
}

impl Serialize for QuestionId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuestionId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Direction of a question's score anchors.
///
/// `Reverse` questions anchor favorable evidence at score 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimension {
    pub id: DimensionId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: QuestionId,
    pub dimension: DimensionId,
    pub text: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailLevel {
    General,
    Detailed,
}

/// Which guideline text (if any) accompanies a question in a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidelineMode {
    #[serde(rename = "none")]
    NoGuidelines,
    General,
    Detailed,
}

impl fmt::Display for GuidelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidelineMode::NoGuidelines => "none",
            GuidelineMode::General => "general",
            GuidelineMode::Detailed => "detailed",
        })
    }
}

impl FromStr for GuidelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "no" => Ok(GuidelineMode::NoGuidelines),
            "general" => Ok(GuidelineMode::General),
            "detailed" => Ok(GuidelineMode::Detailed),
            other => Err(format!(
                "unknown guideline setting `{other}` (expected none, general or detailed)"
            )),
        }
    }
}

/// Five anchor texts, indexed by score 1..=5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidelineSet {
    /// `None` for the question-independent general set.
    pub question: Option<QuestionId>,
    pub detail_level: DetailLevel,
    entries: [String; 5],
}

impl GuidelineSet {
    pub fn entry(&self, score: u8) -> Option<&str> {
        (SCALE_MIN..=SCALE_MAX)
            .contains(&score)
            .then(|| self.entries[(score - 1) as usize].as_str())
    }

    /// All five entries in ascending score order, one `<score> = <text>` line each.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, text)| format!("{} = {}", i + 1, text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RubricWarning {
    /// The favorable anchor's wording points the other way from the declared polarity.
    AnchorDirection {
        question: QuestionId,
        polarity: Polarity,
    },
}

impl fmt::Display for RubricWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RubricWarning::AnchorDirection { question, polarity } => write!(
                f,
                "{question}: anchor wording is inconsistent with {} polarity",
                match polarity {
                    Polarity::Forward => "forward",
                    Polarity::Reverse => "reverse",
                }
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub min: i64,
    pub max: i64,
    pub neutral: i64,
}

/// A validated rubric. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rubric {
    language: String,
    dimensions: Vec<Dimension>,
    questions: Vec<Question>,
    general: GuidelineSet,
    detailed: BTreeMap<QuestionId, GuidelineSet>,
    warnings: Vec<RubricWarning>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RubricDocument {
    language: String,
    scale: Scale,
    dimensions: Vec<DimensionDoc>,
    questions: Vec<QuestionDoc>,
    general_guidelines: BTreeMap<String, String>,
    detailed_guidelines: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionDoc {
    id: String,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionDoc {
    id: String,
    dimension: String,
    polarity: Polarity,
    text: String,
}

/// Reads and validates a rubric document.
pub fn load_rubric<R: Read>(mut source: R) -> Result<Rubric, RubricError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    Rubric::from_toml_str(&text)
}

impl Rubric {
    /// The shipped English rubric.
    pub fn default_english() -> Rubric {
        Rubric::from_toml_str(DEFAULT_RUBRIC).expect("shipped rubric is valid")
    }

    pub fn default_source() -> &'static str {
        DEFAULT_RUBRIC
    }

    pub fn from_toml_str(text: &str) -> Result<Rubric, RubricError> {
        let doc: RubricDocument =
            toml::from_str(text).map_err(|e| RubricError::Parse(e.to_string()))?;
        Rubric::from_document(doc)
    }

    fn from_document(doc: RubricDocument) -> Result<Rubric, RubricError> {
        let Scale { min, max, neutral } = doc.scale;
        if (min, max, neutral) != (SCALE_MIN as i64, SCALE_MAX as i64, NEUTRAL_POINT as i64) {
            return Err(RubricError::Scale { min, max, neutral });
        }

        let mut dimensions = Vec::with_capacity(3);
        for d in &doc.dimensions {
            let id: DimensionId = d.id.parse()?;
            if dimensions.iter().any(|x: &Dimension| x.id == id) {
                return Err(RubricError::DuplicateDimension(id));
            }
            dimensions.push(Dimension {
                id,
                label: d.label.clone(),
            });
        }
        for id in DimensionId::ALL {
            if !dimensions.iter().any(|d| d.id == id) {
                return Err(RubricError::MissingDimension(id));
            }
        }
        dimensions.sort_by_key(|d| d.id);

        let mut questions: BTreeMap<QuestionId, Question> = BTreeMap::new();
        for q in &doc.questions {
            let id: QuestionId = q.id.parse()?;
            let dimension: DimensionId = q.dimension.parse()?;
            if questions.contains_key(&id) {
                return Err(RubricError::DuplicateQuestion(id));
            }
            if dimension != id.dimension() {
                return Err(RubricError::WrongDimension {
                    question: id,
                    expected: id.dimension(),
                    found: dimension,
                });
            }
            if q.text.trim().is_empty() {
                return Err(RubricError::EmptyQuestionText(id));
            }
            questions.insert(
                id,
                Question {
                    id,
                    dimension,
                    text: q.text.clone(),
                    polarity: q.polarity,
                },
            );
        }
        for id in QuestionId::all() {
            if !questions.contains_key(&id) {
                return Err(RubricError::MissingQuestion(id));
            }
        }

        let general = GuidelineSet {
            question: None,
            detail_level: DetailLevel::General,
            entries: score_entries(&doc.general_guidelines, RubricError::MissingGeneral)?,
        };

        let mut detailed = BTreeMap::new();
        for (key, entries) in &doc.detailed_guidelines {
            let id: QuestionId = key
                .parse()
                .map_err(|_| RubricError::UnexpectedDetailed(key.clone()))?;
            let entries = score_entries(entries, |s| RubricError::MissingDetailed(id, s))?;
            if detailed.contains_key(&id) {
                return Err(RubricError::DuplicateQuestion(id));
            }
            detailed.insert(
                id,
                GuidelineSet {
                    question: Some(id),
                    detail_level: DetailLevel::Detailed,
                    entries,
                },
            );
        }
        for id in QuestionId::all() {
            if !detailed.contains_key(&id) {
                return Err(RubricError::MissingDetailed(id, SCALE_MIN));
            }
        }

        let mut rubric = Rubric {
            language: doc.language,
            dimensions,
            questions: questions.into_values().collect(),
            general,
            detailed,
            warnings: Vec::new(),
        };
        rubric.warnings = anchor_direction_warnings(&rubric);
        Ok(rubric)
    }

    pub fn to_toml_string(&self) -> String {
        let entries = |set: &GuidelineSet| {
            set.entries
                .iter()
                .enumerate()
                .map(|(i, t)| ((i + 1).to_string(), t.clone()))
                .collect::<BTreeMap<_, _>>()
        };
        let doc = RubricDocument {
            language: self.language.clone(),
            scale: Scale {
                min: SCALE_MIN as i64,
                max: SCALE_MAX as i64,
                neutral: NEUTRAL_POINT as i64,
            },
            dimensions: self
                .dimensions
                .iter()
                .map(|d| DimensionDoc {
                    id: d.id.to_string(),
                    label: d.label.clone(),
                })
                .collect(),
            questions: self
                .questions
                .iter()
                .map(|q| QuestionDoc {
                    id: q.id.to_string(),
                    dimension: q.dimension.to_string(),
                    polarity: q.polarity,
                    text: q.text.clone(),
                })
                .collect(),
            general_guidelines: entries(&self.general),
            detailed_guidelines: self
                .detailed
                .iter()
                .map(|(id, set)| (id.to_string(), entries(set)))
                .collect(),
        };
        toml::to_string(&doc).expect("rubric document serializes")
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn question(&self, id: QuestionId) -> &Question {
        &self.questions[(id.number() - 1) as usize]
    }

    pub fn general_guidelines(&self) -> &GuidelineSet {
        &self.general
    }

    pub fn detailed_guidelines(&self, id: QuestionId) -> &GuidelineSet {
        &self.detailed[&id]
    }

    /// Non-fatal findings from validation.
    pub fn warnings(&self) -> &[RubricWarning] {
        &self.warnings
    }

    /// Maps a raw rating onto the "higher = stronger alliance" direction.
    pub fn normalize(&self, id: QuestionId, raw: f64) -> Result<f64, RubricError> {
        normalize_score(self.question(id), raw)
    }
}

fn score_entries(
    map: &BTreeMap<String, String>,
    missing: impl Fn(u8) -> RubricError,
) -> Result<[String; 5], RubricError> {
    for key in map.keys() {
        match key.parse::<u8>() {
            Ok(s) if (SCALE_MIN..=SCALE_MAX).contains(&s) && key.len() == 1 => {}
            _ => return Err(RubricError::ScoreKey(key.clone())),
        }
    }
    let mut out: [String; 5] = Default::default();
    for score in SCALE_MIN..=SCALE_MAX {
        match map.get(&score.to_string()) {
            Some(text) if !text.trim().is_empty() => out[(score - 1) as usize] = text.clone(),
            _ => return Err(missing(score)),
        }
    }
    Ok(out)
}

/// Guideline block embedded in a prompt for `mode`, or `None` when no
/// guidelines are shown.
pub fn guideline_text(rubric: &Rubric, q: QuestionId, mode: GuidelineMode) -> Option<String> {
    match mode {
        GuidelineMode::NoGuidelines => None,
        GuidelineMode::General => Some(rubric.general_guidelines().render()),
        GuidelineMode::Detailed => Some(rubric.detailed_guidelines(q).render()),
    }
}

/// `Forward` keeps the score, `Reverse` reflects it around the neutral point.
///
/// Accepts fractional means; anything outside `[1, 5]` is rejected.
pub fn normalize_score(q: &Question, raw: f64) -> Result<f64, RubricError> {
    if !raw.is_finite() || raw < SCALE_MIN as f64 || raw > SCALE_MAX as f64 {
        return Err(RubricError::ScoreOutOfRange(raw));
    }
    Ok(match q.polarity {
        Polarity::Forward => raw,
        Polarity::Reverse => (SCALE_MIN + SCALE_MAX) as f64 - raw,
    })
}

// Coarse lexical cues used to check that each question's favorable anchor
// reads favorably.
const NEGATIVE_CUES: &[&str] = &[
    "disagree",
    "disagrees",
    "disagreement",
    "disagreements",
    "conflict",
    "conflicts",
    "conflicting",
    "dissatisfaction",
    "dissatisfied",
    "refuse",
    "refuses",
    "oppose",
    "opposition",
    "hostility",
    "hostile",
    "mistrust",
    "distrust",
    "doubt",
    "doubts",
    "resist",
    "resists",
    "resistance",
    "argue",
    "argues",
    "arguing",
    "arguments",
    "indifferent",
    "inattentive",
    "negative",
    "tension",
    "pointless",
    "pessimism",
    "discouragement",
    "disregard",
    "disregarded",
    "disregarding",
    "inappropriate",
    "confrontations",
    "aversions",
    "misunderstandings",
    "animosity",
    "difficult",
    "challenging",
    "confusion",
    "withdraws",
    "withdrawal",
    "uncertain",
];

const POSITIVE_CUES: &[&str] = &[
    "agree",
    "agrees",
    "agreement",
    "consensus",
    "satisfied",
    "satisfaction",
    "trust",
    "care",
    "cares",
    "caring",
    "gratitude",
    "appreciation",
    "appreciates",
    "appreciate",
    "positive",
    "smooth",
    "smoothly",
    "productive",
    "confidence",
    "enthusiasm",
    "enthusiastic",
    "cooperative",
    "cooperation",
    "engage",
    "engages",
    "engaged",
    "acknowledge",
    "acknowledges",
    "effective",
    "warmth",
    "empathy",
    "encouragement",
    "encourages",
    "excited",
    "consistent",
    "clarity",
];

fn cue_balance(words: &Regex, text: &str) -> i32 {
    let lower = text.to_lowercase();
    words
        .find_iter(&lower)
        .map(|m| {
            let w = m.as_str();
            if POSITIVE_CUES.contains(&w) {
                1
            } else if NEGATIVE_CUES.contains(&w) {
                -1
            } else {
                0
            }
        })
        .sum()
}

fn anchor_direction_warnings(rubric: &Rubric) -> Vec<RubricWarning> {
    let words = Regex::new(r"[a-z]+").expect("static regex");
    rubric
        .questions
        .iter()
        .filter_map(|q| {
            let set = rubric.detailed_guidelines(q.id);
            let low = cue_balance(&words, set.entry(SCALE_MIN).unwrap_or_default());
            let high = cue_balance(&words, set.entry(SCALE_MAX).unwrap_or_default());
            let consistent = match q.polarity {
                Polarity::Forward => high > 0 && low < 0,
                Polarity::Reverse => low > 0 && high < 0,
            };
            (!consistent).then_some(RubricWarning::AnchorDirection {
                question: q.id,
                polarity: q.polarity,
            })
        })
        .collect()
}
