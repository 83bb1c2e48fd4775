//! `alliance`: ingest transcripts, collect ratings, and build reports.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use alliance_core::analysis::{
    aggregate_by_session, alignment, descriptive_distribution, experience_comparison,
    inter_rater_consistency, outcome_correlation, phase_trend, read_counselor_meta,
    read_raw_scores, self_consistency, sheets_from_raw_scores, Report, ScoreSheet,
};
use alliance_core::feedback::{compose_feedback, read_assessments, summarize_assessments};
use alliance_core::promptkit::{enumerate_jobs, PromptTemplate};
use alliance_core::rater::{
    read_ratings, run_batch, BatchOptions, HttpBackend, MockBackend, MockRaterConfig,
    ProviderConfig, Rater, RaterBackend, RatingRecord,
};
use alliance_core::rubric::{load_rubric, Rubric};
use alliance_core::transcript::{anonymization_check, corpus_stats, ingest, serialize, SessionSet};

use config::{MockSection, RunConfig, DEFAULT_OUT};

#[derive(Debug, Parser)]
#[command(
    name = "alliance",
    version,
    about = "Working-alliance scoring for counseling transcripts"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write line-delimited records or aligned text.
    #[arg(long, global = true, value_enum, default_value_t = Format::Records)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Records,
    Text,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a transcript file, store it and print corpus statistics.
    Ingest {
        #[arg(value_name = "TRANSCRIPTS")]
        transcripts: PathBuf,
    },
    /// Rate every session on every question.
    Evaluate(EvaluateArgs),
    /// Build a report from stored ratings.
    Report {
        #[arg(value_enum)]
        kind: ReportKind,
        #[command(flatten)]
        inputs: ReportInputs,
    },
    /// Feedback documents and their assessments.
    #[command(subcommand)]
    Feedback(FeedbackCommand),
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Transcripts (JSONL); defaults to the store written by `ingest`.
    #[arg(long, value_name = "PATH")]
    transcripts: Option<PathBuf>,
    /// Rubric (TOML); defaults to the built-in English rubric.
    #[arg(long, value_name = "PATH")]
    rubric: Option<PathBuf>,
    /// Prompt template; defaults to the built-in template.
    #[arg(long, value_name = "PATH")]
    template: Option<PathBuf>,
    /// Chat-completion provider description (JSON).
    #[arg(long, value_name = "PATH")]
    provider: Option<PathBuf>,
    /// none, general or detailed, optionally with a `+cot` suffix.
    #[arg(long)]
    setting: Option<String>,
    /// Ask for evidence before the score.
    #[arg(long)]
    cot: bool,
    /// Independent ratings per session and question.
    #[arg(long)]
    runs: Option<u32>,
    /// Maximum requests in flight.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Extra attempts after a transport or parse failure.
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportKind {
    Consistency,
    Alignment,
    Distribution,
    Experience,
    Phases,
    Outcomes,
    Feedback,
}

impl ReportKind {
    fn name(self) -> &'static str {
        match self {
            ReportKind::Consistency => "consistency",
            ReportKind::Alignment => "alignment",
            ReportKind::Distribution => "distribution",
            ReportKind::Experience => "experience",
            ReportKind::Phases => "phases",
            ReportKind::Outcomes => "outcomes",
            ReportKind::Feedback => "feedback",
        }
    }
}

#[derive(Debug, Args)]
struct ReportInputs {
    /// Model ratings; defaults to `<out>/ratings.jsonl`.
    #[arg(long, value_name = "PATH")]
    ratings: Option<PathBuf>,
    /// Human ratings in the same record format.
    #[arg(long, value_name = "PATH")]
    human: Option<PathBuf>,
    /// Reference raw scores `{session_id, question_id, score}`.
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    /// Transcripts; defaults to the store written by `ingest`.
    #[arg(long, value_name = "PATH")]
    transcripts: Option<PathBuf>,
    /// Counselor experience `{counselor_id, years_experience}`.
    #[arg(long, value_name = "PATH")]
    counselors: Option<PathBuf>,
    /// Counselor ratings of feedback documents.
    #[arg(long, value_name = "PATH")]
    assessments: Option<PathBuf>,
    /// Rubric (TOML); defaults to the built-in English rubric.
    #[arg(long, value_name = "PATH")]
    rubric: Option<PathBuf>,
    /// For `consistency`: agreement between raters (including `--human`) instead of across runs.
    #[arg(long)]
    between_raters: bool,
}

#[derive(Debug, Subcommand)]
enum FeedbackCommand {
    /// Write one feedback document per session.
    Compose {
        /// Ratings; defaults to `<out>/ratings.jsonl`.
        #[arg(long, value_name = "PATH")]
        ratings: Option<PathBuf>,
        /// Rubric (TOML); defaults to the built-in English rubric.
        #[arg(long, value_name = "PATH")]
        rubric: Option<PathBuf>,
        /// Only this session.
        #[arg(long)]
        session: Option<String>,
    },
    /// Average counselors' ratings of feedback documents.
    Summarize {
        #[arg(value_name = "ASSESSMENTS")]
        assessments: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    format: Format,
}

impl Ctx {
    /// A path given on the command line wins over the config entry.
    fn path(&self, flag: &Option<PathBuf>, from_config: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone()
            .or_else(|| from_config.as_ref().map(|p| self.config.resolve(p)))
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create output directory {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn rubric(&self, flag: &Option<PathBuf>) -> Result<Rubric> {
        let rubric = match self.path(flag, &self.config.rubric) {
            Some(p) => load_rubric(open(&p)?).with_context(|| format!("rubric {}", p.display()))?,
            None => Rubric::default_english(),
        };
        for w in rubric.warnings() {
            eprintln!("warning: rubric: {w}");
        }
        Ok(rubric)
    }

    fn sessions(&self, flag: &Option<PathBuf>) -> Result<SessionSet> {
        let stored = self.out.join("sessions.jsonl");
        let path = self
            .path(flag, &self.config.transcripts)
            .or_else(|| stored.exists().then_some(stored))
            .ok_or_else(|| {
                anyhow!("no transcripts given (use --transcripts, `transcripts` in the config, or run `alliance ingest` first)")
            })?;
        ingest(BufReader::new(open(&path)?))
            .with_context(|| format!("transcripts {}", path.display()))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(|p| config.resolve(p)))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Ctx {
        config,
        out,
        format: cli.format,
    };
    match cli.command {
        Command::Ingest { transcripts } => cmd_ingest(&ctx, &transcripts),
        Command::Evaluate(args) => cmd_evaluate(ctx, args),
        Command::Report { kind, inputs } => cmd_report(&ctx, kind, &inputs),
        Command::Feedback(FeedbackCommand::Compose {
            ratings,
            rubric,
            session,
        }) => cmd_feedback_compose(&ctx, &ratings, &rubric, session.as_deref()),
        Command::Feedback(FeedbackCommand::Summarize { assessments }) => {
            let list = read_assessments(BufReader::new(open(&assessments)?))
                .with_context(|| format!("assessments {}", assessments.display()))?;
            let summary = summarize_assessments(&list)?;
            emit_report(&ctx, "feedback_summary", &summary, &[])?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_ingest(ctx: &Ctx, path: &Path) -> Result<ExitCode> {
    let sessions = ingest(BufReader::new(open(path)?))
        .with_context(|| format!("transcripts {}", path.display()))?;
    for s in sessions.iter() {
        for f in anonymization_check(s) {
            eprintln!(
                "warning: session {} utterance {}: possible {} `{}`",
                s.session_id, f.utterance_index, f.category, f.matched
            );
        }
    }
    let stats = corpus_stats(&sessions)?;
    let mut store = Vec::new();
    serialize(&sessions, &mut store)?;
    fs::write(ctx.out_file("sessions.jsonl")?, store)?;
    let table = stats.render_table();
    match ctx.format {
        Format::Text => fs::write(ctx.out_file("corpus_stats.txt")?, &table)?,
        Format::Records => {
            let line = serde_json::to_string(&stats)?;
            fs::write(ctx.out_file("corpus_stats.jsonl")?, format!("{line}\n"))?;
        }
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cmd_evaluate(mut ctx: Ctx, args: EvaluateArgs) -> Result<ExitCode> {
    // Fold command-line overrides into the config that gets persisted.
    let from_file = ctx.config.is_from_file();
    let cfg = &mut ctx.config;
    // Config paths resolve against the config file, so flag paths are made
    // absolute before they join it.
    let absolute = |p: PathBuf| -> Result<PathBuf> {
        Ok(if from_file && p.is_relative() {
            std::env::current_dir()?.join(p)
        } else {
            p
        })
    };
    if let Some(p) = args.transcripts {
        cfg.transcripts = Some(absolute(p)?);
    }
    if let Some(p) = args.rubric {
        cfg.rubric = Some(absolute(p)?);
    }
    if let Some(p) = args.template {
        cfg.template = Some(absolute(p)?);
    }
    if let Some(p) = args.provider {
        cfg.provider = Some(absolute(p)?);
        cfg.mock = None;
    }
    if let Some(s) = args.setting {
        cfg.setting = Some(s);
    }
    if args.cot {
        cfg.cot = Some(true);
    }
    if let Some(r) = args.runs {
        cfg.runs = Some(r);
    }
    if let Some(c) = args.concurrency {
        cfg.concurrency_limit = Some(c);
    }
    if let Some(m) = args.max_retries {
        cfg.max_retries = Some(m);
    }
    cfg.validate()?;
    let cfg = &ctx.config;
    let config_hash = cfg.hash();

    let rubric = ctx.rubric(&None)?;
    let template = match &cfg.template {
        Some(p) => {
            let p = cfg.resolve(p);
            let src = fs::read_to_string(&p)
                .with_context(|| format!("cannot read template {}", p.display()))?;
            PromptTemplate::parse(&src).with_context(|| format!("template {}", p.display()))?
        }
        None => PromptTemplate::default_template(),
    };
    let setting = cfg.setting()?;
    if !setting.is_studied_setting() {
        eprintln!("warning: setting {setting} is outside the four standard settings");
    }

    // Build the backend first so credential problems surface before any work.
    let backend: Box<dyn RaterBackend> = match (&cfg.provider, &cfg.mock) {
        (Some(p), _) => {
            let p = cfg.resolve(p);
            let text = fs::read_to_string(&p)
                .with_context(|| format!("cannot read provider config {}", p.display()))?;
            let provider = ProviderConfig::from_json_str(&text)
                .with_context(|| format!("provider config {}", p.display()))?;
            Box::new(HttpBackend::from_config(provider)?)
        }
        (None, Some(m)) => Box::new(mock_backend(cfg, m)?),
        (None, None) => {
            bail!("no rater backend configured: set `provider` or a `[mock]` section in the config")
        }
    };

    let sessions = ctx.sessions(&None)?;
    let jobs = enumerate_jobs(&sessions, &rubric, &template, setting, cfg.runs())?;
    let mut rater = Rater::new(backend.as_ref());
    if let Some(m) = cfg.max_retries {
        rater = rater.with_max_retries(m);
    }
    rater.config_hash = Some(config_hash.clone());

    let store = ctx.out_file("ratings.jsonl")?;
    let started = unix_now();
    let outcome = run_batch(
        &jobs,
        &rater,
        &BatchOptions {
            concurrency_limit: cfg.concurrency(),
            store: Some(&store),
            cancel: None,
        },
    )?;
    let finished = unix_now();

    let info = backend.info();
    let provenance = json!({
        "config": serde_json::to_value(cfg)?,
        "config_hash": config_hash,
        "template_hash": template.hash(),
        "rubric_hash": sha256_hex(rubric.to_toml_string().as_bytes()),
        "backend": info,
        "setting": setting,
        "jobs": jobs.len(),
    });
    fs::write(
        ctx.out_file("provenance.json")?,
        format!("{}\n", serde_json::to_string_pretty(&provenance)?),
    )?;
    fs::write(
        ctx.out_file("provenance.timestamps.json")?,
        format!(
            "{}\n",
            json!({"evaluate_started": started, "evaluate_finished": finished})
        ),
    )?;

    for f in &outcome.failures {
        eprintln!("failed: {}", f.error);
    }
    println!("{}", outcome.summary_line());
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn mock_backend(cfg: &RunConfig, m: &MockSection) -> Result<MockBackend> {
    let truth_path = cfg.resolve(&m.truth);
    let truth = read_raw_scores(BufReader::new(open(&truth_path)?))
        .with_context(|| format!("mock truth {}", truth_path.display()))?;
    let mut mc = MockRaterConfig::new(truth);
    mc.noise_sd = m.noise_sd;
    mc.seed = m.seed;
    mc.misbehave_rate = m.misbehave_rate;
    if let Some(model) = &m.model {
        mc.model_name = model.clone();
    }
    Ok(MockBackend::new(mc)?)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default()
}

fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let records = read_ratings(BufReader::new(open(path)?))
        .with_context(|| format!("ratings {}", path.display()))?;
    if records.is_empty() {
        bail!(
            "ratings file {} is empty; run `alliance evaluate` first",
            path.display()
        );
    }
    Ok(records)
}

fn ratings_path(ctx: &Ctx, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| ctx.out.join("ratings.jsonl"))
}

fn sheets_for(records: &[RatingRecord], rubric: &Rubric) -> Result<Vec<ScoreSheet>> {
    let raters: BTreeSet<&str> = records.iter().map(|r| r.rater_id.as_str()).collect();
    let label = if raters.len() == 1 {
        records[0].rater_id.clone()
    } else {
        "pooled".to_string()
    };
    Ok(aggregate_by_session(records, rubric, &label)?)
}

fn cmd_report(ctx: &Ctx, kind: ReportKind, inputs: &ReportInputs) -> Result<ExitCode> {
    let name = kind.name();
    if kind == ReportKind::Feedback {
        let path = inputs
            .assessments
            .as_ref()
            .ok_or_else(|| anyhow!("report feedback needs --assessments PATH"))?;
        let list = read_assessments(BufReader::new(open(path)?))
            .with_context(|| format!("assessments {}", path.display()))?;
        emit_report(ctx, name, &summarize_assessments(&list)?, &[])?;
        return Ok(ExitCode::SUCCESS);
    }

    let rubric = ctx.rubric(&inputs.rubric)?;
    let records = load_ratings(&ratings_path(ctx, &inputs.ratings))?;
    let sheets = || sheets_for(&records, &rubric);
    let warnings = |w: &[String]| {
        for m in w {
            eprintln!("warning: {m}");
        }
    };
    match kind {
        ReportKind::Consistency => {
            let table = if inputs.between_raters {
                let mut pooled = records.clone();
                if let Some(h) = &inputs.human {
                    pooled.extend(load_ratings(h)?);
                }
                inter_rater_consistency(&pooled, &rubric)?
            } else {
                self_consistency(&records, &rubric)?
            };
            emit_report(ctx, name, &table, &records)?;
        }
        ReportKind::Alignment => {
            let reference = match (&inputs.human, &inputs.truth) {
                (Some(h), _) => aggregate_by_session(&load_ratings(h)?, &rubric, "human")?,
                (None, Some(t)) => {
                    let truth = read_raw_scores(BufReader::new(open(t)?))
                        .with_context(|| format!("reference scores {}", t.display()))?;
                    sheets_from_raw_scores(&truth, &rubric, "reference")?
                }
                (None, None) => bail!("report alignment needs --human PATH or --truth PATH"),
            };
            let report = alignment(&sheets()?, &reference)?;
            emit_report(ctx, name, &report, &records)?;
        }
        ReportKind::Distribution => {
            emit_report(ctx, name, &descriptive_distribution(&sheets()?)?, &records)?;
        }
        ReportKind::Experience => {
            let sessions = ctx.sessions(&inputs.transcripts)?;
            let path = inputs
                .counselors
                .as_ref()
                .ok_or_else(|| anyhow!("report experience needs --counselors PATH"))?;
            let meta = read_counselor_meta(BufReader::new(open(path)?))
                .with_context(|| format!("counselor metadata {}", path.display()))?;
            let report = experience_comparison(&sheets()?, &sessions, &meta)?;
            warnings(&report.warnings);
            emit_report(ctx, name, &report, &records)?;
        }
        ReportKind::Phases => {
            let sessions = ctx.sessions(&inputs.transcripts)?;
            let report = phase_trend(&sheets()?, &sessions)?;
            warnings(&report.warnings);
            emit_report(ctx, name, &report, &records)?;
        }
        ReportKind::Outcomes => {
            let sessions = ctx.sessions(&inputs.transcripts)?;
            emit_report(
                ctx,
                name,
                &outcome_correlation(&sheets()?, &sessions)?,
                &records,
            )?;
        }
        ReportKind::Feedback => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Provenance shared by every report artifact.
fn provenance_header(ctx: &Ctx, records: &[RatingRecord]) -> Value {
    let distinct = |f: &dyn Fn(&RatingRecord) -> Option<String>| -> Vec<String> {
        records
            .iter()
            .filter_map(f)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    json!({
        "report": "provenance",
        "config_hash": ctx.config.hash(),
        "ratings_config_hashes": distinct(&|r| r.provenance.config_hash.clone()),
        "template_hashes": distinct(&|r| r.provenance.template_hash.clone()),
        "settings": distinct(&|r| r.provenance.setting.map(|s| s.to_string())),
        "models": distinct(&|r| r.provenance.model.clone()),
    })
}

fn emit_report(ctx: &Ctx, name: &str, report: &dyn Report, records: &[RatingRecord]) -> Result<()> {
    let header = provenance_header(ctx, records);
    let (file, body) = match ctx.format {
        Format::Records => {
            let mut body = serde_json::to_string(&header)?;
            body.push('\n');
            for r in report.records() {
                body.push_str(&serde_json::to_string(&r)?);
                body.push('\n');
            }
            (format!("report_{name}.jsonl"), body)
        }
        Format::Text => {
            let mut body = String::new();
            for (k, v) in header.as_object().expect("object") {
                if k == "report" {
                    continue;
                }
                let v = match v {
                    Value::String(s) => s.clone(),
                    Value::Array(a) if a.is_empty() => "none".into(),
                    Value::Array(a) => a
                        .iter()
                        .map(|x| x.as_str().unwrap_or_default().to_string())
                        .collect::<Vec<_>>()
                        .join(", "),
                    other => other.to_string(),
                };
                body.push_str(&format!("# {k}: {v}\n"));
            }
            body.push('\n');
            body.push_str(&report.render_text());
            print!("{}", report.render_text());
            (format!("report_{name}.txt"), body)
        }
    };
    let path = ctx.out_file(&file)?;
    fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_feedback_compose(
    ctx: &Ctx,
    ratings: &Option<PathBuf>,
    rubric: &Option<PathBuf>,
    only: Option<&str>,
) -> Result<ExitCode> {
    let rubric = ctx.rubric(rubric)?;
    let records = load_ratings(&ratings_path(ctx, ratings))?;
    let mut by_session: BTreeMap<&str, Vec<RatingRecord>> = BTreeMap::new();
    for r in &records {
        if only.is_none_or(|s| s == r.session_id) {
            by_session.entry(&r.session_id).or_default().push(r.clone());
        }
    }
    if by_session.is_empty() {
        bail!("no ratings for session `{}`", only.unwrap_or_default());
    }
    let dir = ctx.out_file("feedback")?;
    fs::create_dir_all(&dir)?;
    let mut lines = String::new();
    for (session, recs) in &by_session {
        let sheet = sheets_for(recs, &rubric)?.remove(0);
        let report = compose_feedback(&sheet, recs, &rubric)?;
        fs::write(dir.join(format!("{session}.txt")), report.render_text())?;
        lines.push_str(&serde_json::to_string(&report.record())?);
        lines.push('\n');
    }
    let path = ctx.out_file("feedback.jsonl")?;
    let mut f = File::create(&path)?;
    f.write_all(lines.as_bytes())?;
    eprintln!(
        "wrote {} feedback document(s) to {}",
        by_session.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
