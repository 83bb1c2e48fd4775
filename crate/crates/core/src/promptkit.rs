//! Prompt assembly for one (session, question, setting) triple, and the job
//! list for a full rating run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rubric::{guideline_text, GuidelineMode, QuestionId, Rubric};
use crate::transcript::{render_dialogue, RoleLabels, Session, SessionSet};

const DEFAULT_TEMPLATE: &str = include_str!("../data/prompt_template.txt");

/// Prompts longer than this many characters are refused unless the
/// template says otherwise.
pub const DEFAULT_CHAR_BUDGET: usize = 120_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("template line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("template section `{0}` is missing")]
    MissingSection(&'static str),
    #[error("template section `{0}` appears twice")]
    DuplicateSection(String),
    #[error("template layout never uses {{{0}}}")]
    MissingPlaceholder(&'static str),
    #[error("template placeholder unresolved: {{{0}}}")]
    Unresolved(String),
    #[error(
        "prompt for {session_id}/{question} is {chars} characters, over the budget of {budget}"
    )]
    OverBudget {
        session_id: String,
        question: QuestionId,
        chars: usize,
        budget: usize,
    },
    #[error("runs must be at least 1")]
    NoRuns,
}

/// Guideline detail plus whether the rater must give evidence first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalSetting {
    pub guidelines: GuidelineMode,
    pub cot: bool,
}

impl EvalSetting {
    pub const NO_GUIDELINES: EvalSetting = EvalSetting {
        guidelines: GuidelineMode::NoGuidelines,
        cot: false,
    };
    pub const GENERAL: EvalSetting = EvalSetting {
        guidelines: GuidelineMode::General,
        cot: false,
    };
    pub const DETAILED: EvalSetting = EvalSetting {
        guidelines: GuidelineMode::Detailed,
        cot: false,
    };
    pub const DETAILED_COT: EvalSetting = EvalSetting {
        guidelines: GuidelineMode::Detailed,
        cot: true,
    };

    /// The four settings studied in the original experiments.
    pub const STUDIED_SETTINGS: [EvalSetting; 4] = [
        Self::NO_GUIDELINES,
        Self::GENERAL,
        Self::DETAILED,
        Self::DETAILED_COT,
    ];

    pub fn new(guidelines: GuidelineMode, cot: bool) -> Self {
        EvalSetting { guidelines, cot }
    }

    /// False for combinations outside the four studied settings; reports
    /// flag these as non-standard.
    pub fn is_studied_setting(&self) -> bool {
        Self::STUDIED_SETTINGS.contains(self)
    }
}

impl fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.guidelines)?;
        if self.cot {
            f.write_str("+cot")?;
        }
        Ok(())
    }
}

impl FromStr for EvalSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mode, cot) = match s.strip_suffix("+cot") {
            Some(rest) => (rest, true),
            None => (s, false),
        };
        Ok(EvalSetting {
            guidelines: mode.parse()?,
            cot,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Task,
    Dialogue,
    Question,
    Guidelines,
    Cot,
    Format,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "task" => Slot::Task,
            "dialogue" => Slot::Dialogue,
            "question" => Slot::Question,
            "guidelines" => Slot::Guidelines,
            "cot" => Slot::Cot,
            "format" => Slot::Format,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Task => "task",
            Slot::Dialogue => "dialogue",
            Slot::Question => "question",
            Slot::Guidelines => "guidelines",
            Slot::Cot => "cot",
            Slot::Format => "format",
        }
    }
}

/// A parsed prompt template file.
///
/// The file is a sequence of `@@ <name>` sections: `task`, `cot`, `format`,
/// `format_cot` and `layout`. Lines before the first section must be blank
/// or start with `#`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    task: String,
    cot: String,
    format: String,
    format_cot: String,
    paragraphs: Vec<Vec<Piece>>,
    hash: String,
    char_budget: usize,
}

impl PromptTemplate {
    pub fn default_template() -> PromptTemplate {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }

    pub fn default_source() -> &'static str {
        DEFAULT_TEMPLATE
    }

    pub fn parse(source: &str) -> Result<PromptTemplate, PromptError> {
        let mut sections: BTreeMap<String, (usize, Vec<&str>)> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, line) in source.lines().enumerate() {
            if let Some(name) = line.strip_prefix("@@") {
                let name = name.trim().to_string();
                if !["task", "cot", "format", "format_cot", "layout"].contains(&name.as_str()) {
                    return Err(PromptError::Syntax {
                        line: i + 1,
                        message: format!("unknown section `{name}`"),
                    });
                }
                if sections.contains_key(&name) {
                    return Err(PromptError::DuplicateSection(name));
                }
                sections.insert(name.clone(), (i + 2, Vec::new()));
                current = Some(name);
                continue;
            }
            match &current {
                Some(name) => sections.get_mut(name).expect("open section").1.push(line),
                None if line.trim().is_empty() || line.starts_with('#') => {}
                None => {
                    return Err(PromptError::Syntax {
                        line: i + 1,
                        message: "text outside of a section".into(),
                    })
                }
            }
        }

        let mut take = |name: &'static str| -> Result<(usize, String), PromptError> {
            let (line, lines) = sections
                .remove(name)
                .ok_or(PromptError::MissingSection(name))?;
            Ok((line, lines.join("\n").trim_matches('\n').to_string()))
        };
        let (_, task) = take("task")?;
        let (_, cot) = take("cot")?;
        let (_, format) = take("format")?;
        let (_, format_cot) = take("format_cot")?;
        let (layout_line, layout) = take("layout")?;

        let mut paragraphs = Vec::new();
        for para in split_paragraphs(&layout) {
            paragraphs.push(scan_placeholders(para, layout_line)?);
        }
        for slot in [Slot::Task, Slot::Dialogue, Slot::Question, Slot::Format] {
            let used = paragraphs.iter().flatten().any(|p| *p == Piece::Slot(slot));
            if !used {
                return Err(PromptError::MissingPlaceholder(slot.name()));
            }
        }

        Ok(PromptTemplate {
            task,
            cot,
            format,
            format_cot,
            paragraphs,
            hash: hex::encode(Sha256::digest(source.as_bytes())),
            char_budget: DEFAULT_CHAR_BUDGET,
        })
    }

    pub fn with_char_budget(mut self, budget: usize) -> Self {
        self.char_budget = budget;
        self
    }

    pub fn char_budget(&self) -> usize {
        self.char_budget
    }

    /// SHA-256 of the template source, hex encoded.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn render(&self, prompt: &Prompt) -> String {
        let value = |slot: Slot| -> Option<&str> {
            match slot {
                Slot::Task => Some(&prompt.task_definition),
                Slot::Dialogue => Some(&prompt.dialogue),
                Slot::Question => Some(&prompt.question),
                Slot::Guidelines => prompt.guidelines.as_deref(),
                Slot::Cot => prompt.cot_instruction.as_deref(),
                Slot::Format => Some(&prompt.expected_response_format),
            }
        };
        let mut kept = Vec::new();
        'para: for para in &self.paragraphs {
            let mut out = String::new();
            for piece in para {
                match piece {
                    Piece::Text(t) => out.push_str(t),
                    Piece::Slot(slot) => match value(*slot) {
                        Some(v) => out.push_str(v),
                        None => continue 'para,
                    },
                }
            }
            kept.push(out);
        }
        let mut text = kept.join("\n\n");
        text.push('\n');
        text
    }
}

fn split_paragraphs(layout: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in layout.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if blank {
            if let Some(s) = start.take() {
                out.push(layout[s..end].trim_end_matches('\n'));
            }
        } else {
            start.get_or_insert(offset);
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(layout[s..end].trim_end_matches('\n'));
    }
    out
}

fn scan_placeholders(para: &str, line: usize) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut chars = para.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, c)| c) == Some('{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek().map(|&(_, c)| c) == Some('}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some((_, '}')) => break,
                        Some((_, c)) => name.push(c),
                        None => {
                            return Err(PromptError::Syntax {
                                line,
                                message: "unclosed `{` in layout".into(),
                            })
                        }
                    }
                }
                let slot = Slot::parse(&name).ok_or(PromptError::Unresolved(name))?;
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Slot(slot));
            }
            '}' => {
                return Err(PromptError::Syntax {
                    line,
                    message: "unmatched `}` in layout (write `}}` for a literal brace)".into(),
                })
            }
            c => text.push(c),
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

/// A fully assembled rating prompt. `text` is what gets sent to a rater.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prompt {
    pub task_definition: String,
    pub dialogue: String,
    pub question: String,
    pub guidelines: Option<String>,
    pub cot_instruction: Option<String>,
    pub expected_response_format: String,
    pub text: String,
}

pub fn build_prompt(
    session: &Session,
    question: QuestionId,
    setting: EvalSetting,
    rubric: &Rubric,
    template: &PromptTemplate,
) -> Result<Prompt, PromptError> {
    let mut prompt = Prompt {
        task_definition: template.task.clone(),
        dialogue: render_dialogue(session, &RoleLabels::default()),
        question: rubric.question(question).text.clone(),
        guidelines: guideline_text(rubric, question, setting.guidelines),
        cot_instruction: setting.cot.then(|| template.cot.clone()),
        expected_response_format: if setting.cot {
            template.format_cot.clone()
        } else {
            template.format.clone()
        },
        text: String::new(),
    };
    prompt.text = template.render(&prompt);
    let chars = prompt.text.chars().count();
    if chars > template.char_budget {
        return Err(PromptError::OverBudget {
            session_id: session.session_id.clone(),
            question,
            chars,
            budget: template.char_budget,
        });
    }
    Ok(prompt)
}

/// Identity of one rating: which session, which question, which repetition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub session_id: String,
    pub question_id: QuestionId,
    pub run_index: u32,
}

impl fmt::Display for JobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/run{}",
            self.session_id, self.question_id, self.run_index
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingJob {
    pub key: JobKey,
    pub setting: EvalSetting,
    /// Shared by every run of the same (session, question).
    pub prompt: Arc<Prompt>,
    pub template_hash: String,
}

/// One job per (session, question, run), ordered by that triple.
pub fn enumerate_jobs(
    sessions: &SessionSet,
    rubric: &Rubric,
    template: &PromptTemplate,
    setting: EvalSetting,
    runs: u32,
) -> Result<Vec<RatingJob>, PromptError> {
    if runs == 0 {
        return Err(PromptError::NoRuns);
    }
    let mut ordered: Vec<&Session> = sessions.iter().collect();
    ordered.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let mut jobs = Vec::with_capacity(ordered.len() * QuestionId::COUNT * runs as usize);
    for session in ordered {
        for q in QuestionId::all() {
            let prompt = Arc::new(build_prompt(session, q, setting, rubric, template)?);
            for run_index in 0..runs {
                jobs.push(RatingJob {
                    key: JobKey {
                        session_id: session.session_id.clone(),
                        question_id: q,
                        run_index,
                    },
                    setting,
                    prompt: Arc::clone(&prompt),
                    template_hash: template.hash.clone(),
                });
            }
        }
    }
    Ok(jobs)
}
