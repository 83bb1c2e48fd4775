//! Rating backends, response parsing and resumable batch execution.
//!
//! A backend turns a prompt into raw text. [`Rater`] wraps a backend with the
//! retry policy and parses responses into [`RatingRecord`]s; [`run_batch`]
//! drives many jobs with bounded concurrency and persists each record as it
//! lands so an interrupted run can pick up where it stopped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::promptkit::{EvalSetting, JobKey, RatingJob};
use crate::rubric::QuestionId;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_TOP_P: f64 = 1.0;
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    Human,
}

/// What a backend reports about itself for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub kind: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub key: &'a JobKey,
    /// 1-based attempt number for this job.
    pub attempt: u32,
    pub prompt: &'a str,
    pub cot: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: network failures, timeouts, 5xx, malformed payloads.
    #[error("transport error: {0}")]
    Transport(String),
    /// Retrying cannot help.
    #[error("{0}")]
    Fatal(String),
}

/// Anything that can answer a rating prompt. Implementations must tolerate
/// concurrent callers.
pub trait RaterBackend: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<EvalSetting>,
    /// Hash of the run configuration that produced the record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Seconds since the Unix epoch; only present when stamping is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl Provenance {
    pub fn human() -> Self {
        Provenance {
            backend: BackendKind::Human,
            model: None,
            temperature: None,
            top_p: None,
            template_hash: None,
            setting: None,
            config_hash: None,
            timestamp: None,
        }
    }
}

/// One rater's answer to one question on one session in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRecord {
    pub session_id: String,
    pub question_id: QuestionId,
    pub run_index: u32,
    pub rater_id: String,
    pub raw_score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    #[serde(default)]
    pub raw_response: String,
    #[serde(default = "one")]
    pub attempts: u32,
    pub provenance: Provenance,
}

fn one() -> u32 {
    1
}

impl RatingRecord {
    pub fn key(&self) -> JobKey {
        JobKey {
            session_id: self.session_id.clone(),
            question_id: self.question_id,
            run_index: self.run_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no `Score:` marker with an integer")]
    NoScoreFound,
    #[error("score {0} is outside 1..5")]
    ScoreOutOfRange(String),
    #[error("no `Evidence:` text before the score")]
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub score: u8,
    pub evidence: Option<String>,
}

static SCORE_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)score\s*\**\s*:\s*\**\s*([+-]?\d+(?:\.\d+)?)").expect("static regex")
});
static EVIDENCE_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)evidence\s*\**\s*:\s*\**").expect("static regex"));

/// Extracts the score after the last `Score:` marker (case-insensitive) and,
/// with `cot`, the text between `Evidence:` and that marker.
pub fn parse_response(text: &str, cot: bool) -> Result<ParsedResponse, ParseError> {
    let caps = SCORE_MARKER
        .captures_iter(text)
        .last()
        .ok_or(ParseError::NoScoreFound)?;
    let marker = caps.get(0).expect("whole match");
    let number = &caps[1];
    let score = match number.parse::<u8>() {
        Ok(s) if (1..=5).contains(&s) => s,
        _ => return Err(ParseError::ScoreOutOfRange(number.to_string())),
    };
    let evidence = if cot {
        let head = &text[..marker.start()];
        let found = EVIDENCE_MARKER.find(head).ok_or(ParseError::NoEvidence)?;
        let body = head[found.end()..].trim();
        if body.is_empty() {
            return Err(ParseError::NoEvidence);
        }
        Some(body.to_string())
    } else {
        None
    };
    Ok(ParsedResponse { score, evidence })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RateError {
    #[error("{key}: transport failed after {attempts} attempts: {message}")]
    Transport {
        key: JobKey,
        attempts: u32,
        message: String,
    },
    #[error("{key}: no parseable answer after {attempts} attempts ({reason}); last response: {last_response:?}")]
    ParseExhausted {
        key: JobKey,
        attempts: u32,
        reason: ParseError,
        last_response: String,
    },
    #[error("{key}: {message}")]
    Fatal { key: JobKey, message: String },
}

impl RateError {
    pub fn key(&self) -> &JobKey {
        match self {
            RateError::Transport { key, .. }
            | RateError::ParseExhausted { key, .. }
            | RateError::Fatal { key, .. } => key,
        }
    }
}

/// A backend plus retry policy and the identity written into records.
pub struct Rater<'a> {
    backend: &'a dyn RaterBackend,
    pub rater_id: String,
    pub max_retries: u32,
    pub config_hash: Option<String>,
    pub stamp_records: bool,
}

impl<'a> Rater<'a> {
    pub fn new(backend: &'a dyn RaterBackend) -> Self {
        Rater {
            rater_id: backend.info().model,
            backend,
            max_retries: DEFAULT_MAX_RETRIES,
            config_hash: None,
            stamp_records: false,
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn backend(&self) -> &dyn RaterBackend {
        self.backend
    }

    /// Rates one job. Parse failures and transport errors are retried with a
    /// fresh call, up to `max_retries` extra attempts.
    pub fn rate(&self, job: &RatingJob) -> Result<RatingRecord, RateError> {
        self.rate_counted(job, &AtomicUsize::new(0))
    }

    fn rate_counted(
        &self,
        job: &RatingJob,
        calls: &AtomicUsize,
    ) -> Result<RatingRecord, RateError> {
        let total = self.max_retries + 1;
        let mut last: Option<RateError> = None;
        for attempt in 1..=total {
            let request = CompletionRequest {
                key: &job.key,
                attempt,
                prompt: &job.prompt.text,
                cot: job.setting.cot,
            };
            calls.fetch_add(1, Ordering::Relaxed);
            let response = match self.backend.complete(&request) {
                Ok(text) => text,
                Err(BackendError::Fatal(message)) => {
                    return Err(RateError::Fatal {
                        key: job.key.clone(),
                        message,
                    })
                }
                Err(BackendError::Transport(message)) => {
                    last = Some(RateError::Transport {
                        key: job.key.clone(),
                        attempts: attempt,
                        message,
                    });
                    continue;
                }
            };
            match parse_response(&response, job.setting.cot) {
                Ok(parsed) => return Ok(self.record(job, parsed, response, attempt)),
                Err(reason) => {
                    last = Some(RateError::ParseExhausted {
                        key: job.key.clone(),
                        attempts: attempt,
                        reason,
                        last_response: response,
                    })
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn record(
        &self,
        job: &RatingJob,
        parsed: ParsedResponse,
        raw_response: String,
        attempts: u32,
    ) -> RatingRecord {
        let info = self.backend.info();
        RatingRecord {
            session_id: job.key.session_id.clone(),
            question_id: job.key.question_id,
            run_index: job.key.run_index,
            rater_id: self.rater_id.clone(),
            raw_score: parsed.score,
            evidence: parsed.evidence,
            raw_response,
            attempts,
            provenance: Provenance {
                backend: info.kind,
                model: Some(info.model),
                temperature: Some(info.temperature),
                top_p: Some(info.top_p),
                template_hash: Some(job.template_hash.clone()),
                setting: Some(job.setting),
                config_hash: self.config_hash.clone(),
                timestamp: self.stamp_records.then(unix_now),
            },
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default()
}

/// Deterministic test double.
///
/// The reported score is `hidden truth + round(N(0, noise_sd))`, clipped to
/// 1..5. The noise draw depends only on the seed and the job key, so retries
/// and scheduling never change a score; whether an attempt emits unparseable
/// text is drawn per attempt with probability `misbehave_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct MockRaterConfig {
    pub hidden_truth: HashMap<(String, QuestionId), u8>,
    pub noise_sd: f64,
    pub seed: u64,
    pub misbehave_rate: f64,
    pub model_name: String,
}

impl MockRaterConfig {
    pub fn new(hidden_truth: HashMap<(String, QuestionId), u8>) -> Self {
        MockRaterConfig {
            hidden_truth,
            noise_sd: 0.0,
            seed: 0,
            misbehave_rate: 0.0,
            model_name: "mock".into(),
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    config: MockRaterConfig,
    noise: Option<Normal<f64>>,
}

impl MockBackend {
    pub fn new(config: MockRaterConfig) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&config.misbehave_rate) {
            return Err(BackendError::Fatal(format!(
                "misbehave_rate {} is not a probability",
                config.misbehave_rate
            )));
        }
        let noise = if config.noise_sd > 0.0 {
            Some(
                Normal::new(0.0, config.noise_sd)
                    .map_err(|e| BackendError::Fatal(e.to_string()))?,
            )
        } else if config.noise_sd == 0.0 {
            None
        } else {
            return Err(BackendError::Fatal(format!(
                "noise_sd {} must be non-negative",
                config.noise_sd
            )));
        };
        Ok(MockBackend { config, noise })
    }

    pub fn config(&self) -> &MockRaterConfig {
        &self.config
    }

    fn rng(&self, stream: &str, key: &JobKey, attempt: Option<u32>) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(stream.as_bytes());
        h.update([0]);
        h.update(key.session_id.as_bytes());
        h.update([0, key.question_id.number()]);
        h.update(key.run_index.to_le_bytes());
        if let Some(a) = attempt {
            h.update(a.to_le_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// The score this backend reports for `key`, independent of attempts.
    pub fn score_for(&self, key: &JobKey) -> Option<u8> {
        let truth = *self
            .config
            .hidden_truth
            .get(&(key.session_id.clone(), key.question_id))?;
        let offset = match &self.noise {
            Some(normal) => normal.sample(&mut self.rng("score", key, None)).round(),
            None => 0.0,
        };
        Some((truth as f64 + offset).clamp(1.0, 5.0) as u8)
    }
}

impl RaterBackend for MockBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: BackendKind::Mock,
            model: self.config.model_name.clone(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
        }
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let key = request.key;
        let score = self.score_for(key).ok_or_else(|| {
            BackendError::Fatal(format!(
                "mock has no hidden truth for {}/{}",
                key.session_id, key.question_id
            ))
        })?;
        if self.config.misbehave_rate > 0.0 {
            let mut rng = self.rng("format", key, Some(request.attempt));
            if rng.random::<f64>() < self.config.misbehave_rate {
                return Ok("I am not able to give a rating for this conversation.".into());
            }
        }
        Ok(if request.cot {
            format!(
                "Evidence: simulated evidence for {} in session {} (run {}).\nScore: {score}",
                key.question_id, key.session_id, key.run_index
            )
        } else {
            format!("Score: {score}")
        })
    }
}

/// Chat-completion provider description. The API key is read from the
/// environment variable named by `auth_env_var`, never from this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// Full endpoint URL, e.g. `https://host/v1/chat/completions`.
    pub base_url: String,
    pub auth_env_var: String,
    pub model: String,
    /// JSON request body. String values `${model}`, `${prompt}`,
    /// `${temperature}` and `${top_p}` are replaced by the corresponding value.
    #[serde(default = "default_request_shape")]
    pub request_shape: Value,
    /// Dotted path to the reply text, array indices as numbers.
    #[serde(default = "default_response_path")]
    pub response_text_path: String,
    #[serde(default)]
    pub rpm_limit: Option<u32>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_request_shape() -> Value {
    serde_json::json!({
        "model": "${model}",
        "messages": [{"role": "user", "content": "${prompt}"}],
        "temperature": "${temperature}",
        "top_p": "${top_p}"
    })
}

fn default_response_path() -> String {
    "choices.0.message.content".into()
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_prefix() -> String {
    "Bearer ".into()
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("provider config is not well-formed: {0}")]
    Parse(String),
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("provider config: {0}")]
    Invalid(String),
}

impl ProviderConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ProviderError> {
        let config: ProviderConfig =
            serde_json::from_str(text).map_err(|e| ProviderError::Parse(e.to_string()))?;
        if !(config.base_url.starts_with("http://") || config.base_url.starts_with("https://")) {
            return Err(ProviderError::Invalid(format!(
                "base_url must be an http(s) URL, got `{}`",
                config.base_url
            )));
        }
        if config.rpm_limit == Some(0) {
            return Err(ProviderError::Invalid("rpm_limit must be positive".into()));
        }
        parse_path(&config.response_text_path).map_err(ProviderError::Invalid)?;
        Ok(config)
    }

    /// Substitutes the prompt and sampling parameters into `request_shape`.
    pub fn request_body(&self, prompt: &str) -> Value {
        fn fill(v: &Value, cfg: &ProviderConfig, prompt: &str) -> Value {
            match v {
                Value::String(s) => match s.as_str() {
                    "${model}" => Value::String(cfg.model.clone()),
                    "${prompt}" => Value::String(prompt.to_string()),
                    "${temperature}" => serde_json::json!(cfg.temperature),
                    "${top_p}" => serde_json::json!(cfg.top_p),
                    _ => v.clone(),
                },
                Value::Array(items) => {
                    Value::Array(items.iter().map(|i| fill(i, cfg, prompt)).collect())
                }
                Value::Object(map) => Value::Object(
                    map.iter()
                        .map(|(k, v)| (k.clone(), fill(v, cfg, prompt)))
                        .collect(),
                ),
                other => other.clone(),
            }
        }
        fill(&self.request_shape, self, prompt)
    }

    /// Pulls the reply text out of a response body.
    pub fn extract_text(&self, body: &Value) -> Result<String, String> {
        let mut cur = body;
        for step in parse_path(&self.response_text_path)? {
            cur = match step {
                PathStep::Key(k) => cur.get(k),
                PathStep::Index(i) => cur.get(i),
            }
            .ok_or_else(|| format!("response has nothing at `{}`", self.response_text_path))?;
        }
        cur.as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("`{}` is not a string", self.response_text_path))
    }
}

enum PathStep<'a> {
    Key(&'a str),
    Index(usize),
}

fn parse_path(path: &str) -> Result<Vec<PathStep<'_>>, String> {
    if path.is_empty() {
        return Err("response_text_path is empty".into());
    }
    path.split('.')
        .map(|seg| {
            if seg.is_empty() {
                Err(format!("empty segment in response_text_path `{path}`"))
            } else if let Ok(i) = seg.parse::<usize>() {
                Ok(PathStep::Index(i))
            } else {
                Ok(PathStep::Key(seg))
            }
        })
        .collect()
}

/// Spaces requests evenly: at most `rpm` starts per minute.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_minute(rpm: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / rpm.max(1) as f64),
            next: Mutex::new(Instant::now()),
        }
    }

    /// Blocks until the caller may start a request.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Blocking HTTP backend for chat-completion style APIs.
pub struct HttpBackend {
    config: ProviderConfig,
    api_key: String,
    agent: ureq::Agent,
    limiter: Option<RateLimiter>,
}

impl HttpBackend {
    /// Fails before any request is made if the API key variable is unset.
    pub fn from_config(config: ProviderConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&config.auth_env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ProviderError::MissingApiKey(config.auth_env_var.clone()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            limiter: config.rpm_limit.map(RateLimiter::per_minute),
            config,
            api_key,
            agent,
        })
    }
}

impl RaterBackend for HttpBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: BackendKind::Http,
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            top_p: self.config.top_p,
        }
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let body = self.config.request_body(request.prompt);
        let auth = format!("{}{}", self.config.auth_prefix, self.api_key);
        let mut response = self
            .agent
            .post(&self.config.base_url)
            .header(self.config.auth_header.as_str(), auth.as_str())
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(BackendError::Fatal(format!(
                    "provider rejected credentials (HTTP {status})"
                )))
            }
            _ => return Err(BackendError::Transport(format!("HTTP {status}: {text}"))),
        }
        let json: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Transport(e.to_string()))?;
        self.config
            .extract_text(&json)
            .map_err(BackendError::Transport)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RatingsError {
    #[error("ratings io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed rating record: {message}")]
    Malformed { line: usize, message: String },
}

/// Reads line-delimited rating records; blank lines are skipped.
pub fn read_ratings<R: BufRead>(reader: R) -> Result<Vec<RatingRecord>, RatingsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RatingRecord =
            serde_json::from_str(&line).map_err(|e| RatingsError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !(1..=5).contains(&rec.raw_score) {
            return Err(RatingsError::Malformed {
                line: i + 1,
                message: format!("raw_score {} outside 1..5", rec.raw_score),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ratings<W: Write>(records: &[RatingRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Append-only ratings file with one writer.
struct RatingSink {
    writer: Mutex<BufWriter<File>>,
}

impl RatingSink {
    fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RatingSink {
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    fn append(&self, record: &RatingRecord) -> std::io::Result<()> {
        let mut w = self.writer.lock().expect("sink lock");
        serde_json::to_writer(&mut *w, record)?;
        w.write_all(b"\n")?;
        w.flush()
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions<'a> {
    pub concurrency_limit: usize,
    /// Ratings file used for resuming and incremental persistence.
    pub store: Option<&'a Path>,
    /// Stops handing out new jobs once set; in-flight jobs finish.
    pub cancel: Option<&'a AtomicBool>,
}

impl Default for BatchOptions<'_> {
    fn default() -> Self {
        BatchOptions {
            concurrency_limit: 1,
            store: None,
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobFailure {
    pub key: JobKey,
    pub error: RateError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Successful records for the given jobs, in job order.
    pub records: Vec<RatingRecord>,
    pub failures: Vec<JobFailure>,
    /// Jobs satisfied by records already in the store.
    pub skipped: usize,
    /// Jobs attempted in this invocation.
    pub attempted: usize,
    pub backend_calls: usize,
    /// Calls beyond the first per attempted job.
    pub retries: usize,
    /// Jobs never started because the batch was cancelled.
    pub not_started: usize,
}

impl BatchOutcome {
    pub fn summary_line(&self) -> String {
        format!(
            "jobs: {}, skipped: {}, new calls: {}, successes: {}, retries: {}, failures: {}",
            self.records.len() + self.failures.len() + self.not_started,
            self.skipped,
            self.backend_calls,
            self.records.len(),
            self.retries,
            self.failures.len()
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("concurrency_limit must be at least 1")]
    ZeroConcurrency,
    #[error(transparent)]
    Store(#[from] RatingsError),
    #[error("failed to persist ratings: {0}")]
    Io(#[from] std::io::Error),
}

/// Runs every job not already persisted in `options.store`.
///
/// Records are appended to the store as they complete. When the batch ends
/// the store is rewritten sorted by key, so its bytes do not depend on the
/// concurrency limit or completion order.
pub fn run_batch(
    jobs: &[RatingJob],
    rater: &Rater<'_>,
    options: &BatchOptions<'_>,
) -> Result<BatchOutcome, BatchError> {
    if options.concurrency_limit == 0 {
        return Err(BatchError::ZeroConcurrency);
    }
    let existing: Vec<RatingRecord> = match options.store {
        Some(path) if path.exists() => read_ratings(BufReader::new(File::open(path)?))?,
        _ => Vec::new(),
    };
    let done: HashMap<JobKey, &RatingRecord> = existing.iter().map(|r| (r.key(), r)).collect();
    let pending: Vec<usize> = (0..jobs.len())
        .filter(|&i| !done.contains_key(&jobs[i].key))
        .collect();
    let sink = options.store.map(RatingSink::open).transpose()?;

    let results: Mutex<Vec<Option<Result<RatingRecord, RateError>>>> =
        Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let sink_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
    let workers = options.concurrency_limit.min(pending.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if options.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                    break;
                }
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&job_index) = pending.get(slot) else {
                    break;
                };
                let outcome = rater.rate_counted(&jobs[job_index], &calls);
                if let (Ok(record), Some(sink)) = (&outcome, &sink) {
                    if let Err(e) = sink.append(record) {
                        sink_error.lock().expect("error lock").get_or_insert(e);
                    }
                }
                results.lock().expect("results lock")[job_index] = Some(outcome);
            });
        }
    });
    drop(sink);
    if let Some(e) = sink_error.into_inner().expect("error lock") {
        return Err(e.into());
    }

    let results = results.into_inner().expect("results lock");
    let mut outcome = BatchOutcome {
        records: Vec::new(),
        failures: Vec::new(),
        skipped: jobs.len() - pending.len(),
        attempted: 0,
        backend_calls: calls.load(Ordering::SeqCst),
        retries: 0,
        not_started: 0,
    };
    for (job, result) in jobs.iter().zip(results) {
        match (done.get(&job.key), result) {
            (Some(prev), _) => outcome.records.push((*prev).clone()),
            (None, Some(Ok(record))) => {
                outcome.attempted += 1;
                outcome.retries += (record.attempts - 1) as usize;
                outcome.records.push(record);
            }
            (None, Some(Err(error))) => {
                outcome.attempted += 1;
                outcome.failures.push(JobFailure {
                    key: job.key.clone(),
                    error,
                });
            }
            (None, None) => outcome.not_started += 1,
        }
    }
    outcome.retries = outcome.backend_calls - outcome.attempted;

    if let Some(path) = options.store {
        let mut all: BTreeMap<JobKey, RatingRecord> =
            existing.into_iter().map(|r| (r.key(), r)).collect();
        for r in &outcome.records {
            all.entry(r.key()).or_insert_with(|| r.clone());
        }
        rewrite_sorted(path, all.values())?;
    }
    Ok(outcome)
}

fn rewrite_sorted<'a>(
    path: &Path,
    records: impl Iterator<Item = &'a RatingRecord>,
) -> std::io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)
}

/// Keys present more than once in `records`.
pub fn duplicate_keys(records: &[RatingRecord]) -> Vec<JobKey> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for r in records {
        let k = r.key();
        if !seen.insert(k.clone()) {
            dups.push(k);
        }
    }
    dups
}
