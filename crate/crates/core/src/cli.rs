//! Command-line front end: config loading, run directories and exit codes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, fmt1, fmt_delta, RandomBaseline, Table};
use crate::backends::{sha256_hex, BackendKind, BackendSpec, Client, ResponseCache};
use crate::corpus::{load_dataset, retention_ratio, Dataset, DatasetFormat};
use crate::curation::{self, CategoryOutcome, CurationError, Preset, VariantOptions};
use crate::extraction::RefusalLexicon;
use crate::grpomath;
use crate::prompting::{PromptTemplate, TemplateName};
use crate::protocols::{
    run_audit, Assignment, AuditOptions, Coverage, DecisionStore, EvalContext, ProtocolError, ProtocolKind,
    ProtocolSpec, TemplateSet, DEFAULT_WORKERS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_COVERAGE: i32 = 3;

/// Default tolerated fraction of uncovered items before a run fails.
pub const DEFAULT_MAX_UNCOVERED: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("coverage breach: {0}")]
    Coverage(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Coverage(_) => EXIT_COVERAGE,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        match e {
            CurationError::CoverageGap { .. } => CliError::Coverage(e.to_string()),
            CurationError::Io { .. } => CliError::Internal(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ta-audit",
    version,
    about = "Text-only answerability audits and visually grounded filtering"
)]
pub struct Cli {
    /// Run config (TOML). Command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output location: run directory for eval/categorize, file for filter/report.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Print planned work and exit without contacting any backend.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query backends with question text only and record TA/VG decisions.
    Eval(EvalArgs),
    /// Build a VG subset from decision stores.
    Filter(FilterArgs),
    /// Ask a judge model why TA items are text-answerable.
    Categorize(CategorizeArgs),
    /// Diagnostic tables.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
        /// Print JSON instead of a text table.
        #[arg(long, global = true)]
        json: bool,
    },
    /// Numerical checks of the policy objective.
    GrpoCheck,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Backend spec file (TOML). Repeatable.
    #[arg(long = "backend")]
    pub backends: Vec<PathBuf>,
    /// Protocol for MCQ items: single, circular:N, pass@K.
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub open_ended_protocol: Option<String>,
    /// vidground, m1 or m2. Backends must declare a role.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub max_uncovered: Option<f64>,
    /// Blank response text in decision stores.
    #[arg(long)]
    pub no_raw: bool,
    #[arg(long)]
    pub template_file: Option<PathBuf>,
    #[arg(long)]
    pub enhanced_template_file: Option<PathBuf>,
    /// Extra refusal phrases, one per line.
    #[arg(long)]
    pub refusal_terms: Option<PathBuf>,
    /// Run every circular permutation even after a miss.
    #[arg(long)]
    pub all_trials: bool,
    /// Re-ask refusals once with the no-refusal template.
    #[arg(long)]
    pub escalate: bool,
    /// Replace the endpoint of every http-chat backend.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct FilterArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Decision store file or directory of stores. Repeatable.
    #[arg(long = "decisions")]
    pub decisions: Vec<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub threshold: Option<usize>,
    #[arg(long)]
    pub max_uncovered: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct CategorizeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Decision store whose TA items are categorized.
    #[arg(long)]
    pub decisions: PathBuf,
    /// Judge backend spec file (TOML).
    #[arg(long)]
    pub judge: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// TA rate per store against a random baseline.
    TaRate {
        #[arg(long = "decisions", required = true)]
        decisions: Vec<PathBuf>,
        /// Chance accuracy in percent; computed from the dataset when omitted.
        #[arg(long)]
        baseline: Option<f64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Overlap of 2 or 3 VG id-sets.
    Agreement {
        #[arg(long)]
        dataset: PathBuf,
        /// Decision store; its VG items form one set named by backend id.
        #[arg(long = "decisions")]
        decisions: Vec<PathBuf>,
        /// NAME=PATH of a file with one id per line.
        #[arg(long = "ids")]
        ids: Vec<String>,
    },
    /// Distribution of correct samples under pass@k.
    Passk {
        #[arg(long = "decisions")]
        decisions: PathBuf,
    },
    /// Full vs VG accuracy and visual gain from an external result log.
    Scores {
        #[arg(long = "results", required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// VG subset of the dataset.
        #[arg(long)]
        vg: PathBuf,
    },
    /// Size of a subset relative to its source.
    Retention {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        subset: PathBuf,
    },
    /// Uniformly spaced frame indices.
    Frames {
        #[arg(long)]
        total: usize,
        #[arg(long)]
        count: usize,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("ta-audit: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => Some(load_file_config(p)?),
        None => None,
    };
    match &cli.command {
        Command::Eval(args) => {
            let cfg = resolve_eval(&cli, args, file.as_ref())?;
            let report = cmd_eval(&cfg)?;
            print!("{}", report.render());
            report.check_coverage(cfg.max_uncovered)
        }
        Command::Filter(args) => {
            let cfg = resolve_filter(&cli, args, file.as_ref())?;
            let m = cmd_filter(&cfg)?;
            println!(
                "{}: retained {} / {} ({}%), uncovered {}",
                m.preset,
                m.retained,
                m.total,
                fmt1(analytics::pct(m.retained, m.total)),
                m.uncovered
            );
            println!("wrote {}", cfg.out.display());
            Ok(())
        }
        Command::Categorize(args) => {
            let cfg = resolve_categorize(&cli, args, file.as_ref())?;
            let table = cmd_categorize(&cfg)?;
            print!("{}", table.render());
            Ok(())
        }
        Command::Report { kind, json } => {
            let table = cmd_report(kind)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&table).expect("table serializes"));
            } else {
                print!("{}", table.render());
            }
            if let Some(out) = &cli.out {
                write_file(out, table.to_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::GrpoCheck => {
            let (table, ok) = cmd_grpo_check(cli.seed.unwrap_or(grpomath::DEFAULT_SEED));
            print!("{}", table.render());
            if ok {
                Ok(())
            } else {
                Err(CliError::Internal("grpo property check failed".into()))
            }
        }
    }
}

// ---------------------------------------------------------------- config files

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    pub protocol: Option<String>,
    pub open_ended_protocol: Option<String>,
    pub workers: Option<usize>,
    pub max_uncovered: Option<f64>,
    pub escalate_on_refusal: Option<bool>,
    pub all_trials: Option<bool>,
    pub include_raw: Option<bool>,
    pub template_file: Option<PathBuf>,
    pub enhanced_template_file: Option<PathBuf>,
    pub refusal_terms: Option<PathBuf>,
    pub threshold: Option<usize>,
    #[serde(default)]
    pub decisions: Vec<PathBuf>,
    #[serde(default)]
    pub backends: Vec<BackendEntry>,
    pub judge: Option<BackendEntry>,
}

/// A backend spec plus the protocol settings a run applies to it.
#[derive(Debug, Clone, Deserialize)]
pub struct BackendEntry {
    #[serde(flatten)]
    pub spec: BackendSpec,
    pub role: Option<String>,
    pub protocol: Option<String>,
    pub open_ended_protocol: Option<String>,
    pub escalate_on_refusal: Option<bool>,
    pub all_trials: Option<bool>,
}

static ENV_VAR: Lazy<Regex> = Lazy::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

/// Expands `${VAR}` from the environment. Unset variables are an error.
pub fn interpolate_env(text: &str) -> Result<String, String> {
    let mut missing = Vec::new();
    let out = ENV_VAR.replace_all(text, |c: &regex::Captures| match std::env::var(&c[1]) {
        Ok(v) => v,
        Err(_) => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if missing.is_empty() {
        Ok(out.into_owned())
    } else {
        Err(format!("unset environment variable(s): {}", missing.join(", ")))
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let text = interpolate_env(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn rebase_entry(base: &Path, mut e: BackendEntry) -> BackendEntry {
    e.spec.script = e.spec.script.map(|s| rebase(base, &s));
    e
}

/// Loads a run config; relative paths inside it are taken from the file's directory.
pub fn load_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let mut c: FileConfig = read_toml(path)?;
    let base = base_dir(path);
    let fix = |p: Option<PathBuf>| p.map(|p| rebase(&base, &p));
    c.dataset = fix(c.dataset);
    c.out = fix(c.out);
    c.template_file = fix(c.template_file);
    c.enhanced_template_file = fix(c.enhanced_template_file);
    c.refusal_terms = fix(c.refusal_terms);
    c.decisions = c.decisions.iter().map(|p| rebase(&base, p)).collect();
    c.backends = c.backends.into_iter().map(|e| rebase_entry(&base, e)).collect();
    c.judge = c.judge.map(|e| rebase_entry(&base, e));
    Ok(c)
}

pub fn load_backend_file(path: &Path) -> Result<BackendEntry, CliError> {
    let e: BackendEntry = read_toml(path)?;
    Ok(rebase_entry(&base_dir(path), e))
}

fn parse_protocol(s: &str) -> Result<ProtocolKind, CliError> {
    s.parse().map_err(|e: ProtocolError| CliError::Config(e.to_string()))
}

fn parse_preset(s: &str) -> Result<Preset, CliError> {
    s.parse().map_err(|e: CurationError| CliError::Config(e.to_string()))
}

fn require_file(what: &str, p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", p.display())))
    }
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    require_file("dataset", path)?;
    load_dataset(path, DatasetFormat::Jsonl).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Internal(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, body).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone)]
pub struct ResolvedBackend {
    pub spec: BackendSpec,
    pub role: Option<String>,
    pub assignment: Assignment,
}

/// Everything `eval` needs, after merging the config file with flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub preset: Option<Preset>,
    pub backends: Vec<ResolvedBackend>,
    pub workers: usize,
    pub max_uncovered: f64,
    pub include_raw: bool,
    pub eval: EvalContext,
    pub dry_run: bool,
    pub verbose: bool,
}

pub fn resolve_eval(cli: &Cli, args: &EvalArgs, file: Option<&FileConfig>) -> Result<RunConfig, CliError> {
    let def = FileConfig::default();
    let f = file.unwrap_or(&def);
    let dataset = args
        .dataset
        .clone()
        .or_else(|| f.dataset.clone())
        .ok_or_else(|| CliError::Config("no dataset given".into()))?;
    require_file("dataset", &dataset)?;
    let out = cli
        .out
        .clone()
        .or_else(|| f.out.clone())
        .ok_or_else(|| CliError::Config("no output directory given (--out)".into()))?;

    let preset = args
        .preset
        .as_deref()
        .or(f.preset.as_deref())
        .map(parse_preset)
        .transpose()?;
    let cli_protocol = args.protocol.as_deref().map(parse_protocol).transpose()?;
    let cli_open = args.open_ended_protocol.as_deref().map(parse_protocol).transpose()?;
    if preset.is_some() && (cli_protocol.is_some() || cli_open.is_some()) {
        return Err(CliError::Config("--protocol cannot be combined with a preset".into()));
    }
    let file_protocol = f.protocol.as_deref().map(parse_protocol).transpose()?;
    let file_open = f.open_ended_protocol.as_deref().map(parse_protocol).transpose()?;

    let mut entries: Vec<BackendEntry> = f.backends.clone();
    for p in &args.backends {
        entries.push(load_backend_file(p)?);
    }
    if entries.is_empty() {
        return Err(CliError::Config("no backends configured".into()));
    }
    let mut seen = HashSet::new();
    let mut backends = Vec::new();
    for mut e in entries {
        if !seen.insert(e.spec.id.clone()) {
            return Err(CliError::Config(format!("duplicate backend id {}", e.spec.id)));
        }
        if let (Some(url), BackendKind::HttpChat) = (&args.base_url, e.spec.kind) {
            e.spec.endpoint = Some(url.clone());
        }
        e.spec.validate().map_err(CliError::Config)?;
        if let Some(script) = &e.spec.script {
            require_file("script", script)?;
        }
        let escalate = args.escalate || e.escalate_on_refusal.or(f.escalate_on_refusal).unwrap_or(false);
        let all_trials = args.all_trials || e.all_trials.or(f.all_trials).unwrap_or(false);
        let (mcq, open) = match preset {
            Some(p) => {
                let role = e
                    .role
                    .as_deref()
                    .ok_or_else(|| CliError::Config(format!("backend {} needs a role for preset {p}", e.spec.id)))?;
                let slot = p
                    .slot(role)
                    .ok_or_else(|| CliError::Config(format!("preset {p} has no role {role}")))?;
                (slot.mcq, Some(slot.open_ended))
            }
            None => {
                let mcq = match cli_protocol {
                    Some(k) => k,
                    None => match &e.protocol {
                        Some(s) => parse_protocol(s)?,
                        None => file_protocol.unwrap_or(ProtocolKind::SinglePass),
                    },
                };
                let open = match cli_open {
                    Some(k) => Some(k),
                    None => match &e.open_ended_protocol {
                        Some(s) => Some(parse_protocol(s)?),
                        None => file_open,
                    },
                };
                (mcq, open)
            }
        };
        let spec = ProtocolSpec::new(mcq)
            .with_escalation(escalate)
            .with_all_trials(all_trials);
        let mut assignment = Assignment::uniform(spec);
        if let Some(k) = open {
            if matches!(k, ProtocolKind::Circular { .. }) {
                return Err(CliError::Config(format!("{k} cannot be used for open-ended items")));
            }
            assignment.open_ended = ProtocolSpec { kind: k, ..spec };
        }
        backends.push(ResolvedBackend {
            spec: e.spec,
            role: e.role,
            assignment,
        });
    }

    let mut templates = TemplateSet::default();
    for (name, path) in [
        (
            TemplateName::Default,
            args.template_file.clone().or_else(|| f.template_file.clone()),
        ),
        (
            TemplateName::Enhanced,
            args.enhanced_template_file
                .clone()
                .or_else(|| f.enhanced_template_file.clone()),
        ),
    ] {
        if let Some(path) = path {
            let t = PromptTemplate::from_file(name, &path)
                .map_err(|e| CliError::Config(format!("template {}: {e}", path.display())))?
                .map_err(|e| CliError::Config(format!("template {}: {e}", path.display())))?;
            templates = templates.with(t);
        }
    }
    let mut lexicon = RefusalLexicon::default();
    if let Some(path) = args.refusal_terms.clone().or_else(|| f.refusal_terms.clone()) {
        lexicon = lexicon
            .extend_from_file(&path)
            .map_err(|e| CliError::Config(format!("refusal terms {}: {e}", path.display())))?;
    }
    let max_uncovered = args.max_uncovered.or(f.max_uncovered).unwrap_or(DEFAULT_MAX_UNCOVERED);
    if !(0.0..=1.0).contains(&max_uncovered) {
        return Err(CliError::Config(format!(
            "max_uncovered must be in [0, 1], got {max_uncovered}"
        )));
    }
    Ok(RunConfig {
        dataset,
        out,
        preset,
        backends,
        workers: args.workers.or(f.workers).unwrap_or(DEFAULT_WORKERS).max(1),
        max_uncovered,
        include_raw: !args.no_raw && f.include_raw.unwrap_or(true),
        eval: EvalContext { lexicon, templates },
        dry_run: cli.dry_run,
        verbose: cli.verbose,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BackendSummary {
    pub id: String,
    pub role: Option<String>,
    pub protocol: String,
    pub open_ended_protocol: String,
    pub items: usize,
    pub planned_requests: usize,
    pub ta: usize,
    pub vg: usize,
    pub uncovered: usize,
    pub ta_pct: f64,
    pub network_calls: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dry_run: bool,
    pub backends: Vec<BackendSummary>,
}

impl EvalReport {
    pub fn planned_requests(&self) -> usize {
        self.backends.iter().map(|b| b.planned_requests).sum()
    }

    pub fn network_calls(&self) -> u64 {
        self.backends.iter().map(|b| b.network_calls).sum()
    }

    pub fn render(&self) -> String {
        if self.dry_run {
            let mut t = Table::new(
                "planned requests (dry run)",
                &["backend", "protocol", "open-ended", "items", "requests"],
            );
            for b in &self.backends {
                t.row(vec![
                    b.id.clone(),
                    b.protocol.clone(),
                    b.open_ended_protocol.clone(),
                    b.items.to_string(),
                    b.planned_requests.to_string(),
                ]);
            }
            return format!("{}total planned requests: {}\n", t.render(), self.planned_requests());
        }
        let mut t = Table::new(
            format!("eval {}", self.dataset),
            &["backend", "protocol", "items", "TA", "VG", "uncovered", "TA %", "calls"],
        );
        for b in &self.backends {
            t.row(vec![
                b.id.clone(),
                b.protocol.clone(),
                b.items.to_string(),
                b.ta.to_string(),
                b.vg.to_string(),
                b.uncovered.to_string(),
                fmt1(b.ta_pct),
                b.network_calls.to_string(),
            ]);
        }
        t.render()
    }

    pub fn check_coverage(&self, max_uncovered: f64) -> Result<(), CliError> {
        for b in &self.backends {
            let frac = if b.items == 0 {
                0.0
            } else {
                b.uncovered as f64 / b.items as f64
            };
            if frac > max_uncovered {
                return Err(CliError::Coverage(format!(
                    "backend {}: {} of {} items uncovered ({:.4} > {})",
                    b.id, b.uncovered, b.items, frac, max_uncovered
                )));
            }
        }
        Ok(())
    }
}

pub fn decisions_dir(run: &Path) -> PathBuf {
    run.join("decisions")
}

pub fn store_path(run: &Path, backend_id: &str) -> PathBuf {
    decisions_dir(run).join(format!("{backend_id}.jsonl"))
}

struct RunLog {
    file: Option<Mutex<fs::File>>,
    verbose: bool,
}

impl RunLog {
    fn open(path: &Path, verbose: bool) -> Self {
        let file = path
            .parent()
            .and_then(|p| fs::create_dir_all(p).ok())
            .and_then(|_| fs::OpenOptions::new().create(true).append(true).open(path).ok())
            .map(Mutex::new);
        Self { file, verbose }
    }

    fn line(&self, msg: &str) {
        let stamped = format!("{} {msg}", chrono::Utc::now().to_rfc3339());
        if let Some(f) = &self.file {
            let _ = writeln!(f.lock().unwrap(), "{stamped}");
        }
        if self.verbose {
            eprintln!("{stamped}");
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    dataset: String,
    dataset_digest: String,
    preset: Option<String>,
    backends: Vec<RunManifestBackend<'a>>,
    max_uncovered: f64,
    include_raw: bool,
    timestamp: String,
}

#[derive(Serialize)]
struct RunManifestBackend<'a> {
    id: &'a str,
    kind: BackendKind,
    model_name: &'a str,
    role: Option<&'a str>,
    protocol: String,
    open_ended_protocol: String,
    escalate_on_refusal: bool,
    temperature: f64,
    store: String,
}

/// Runs every configured backend over the dataset and writes the run directory.
/// The coverage bound is not enforced here; see [`EvalReport::check_coverage`].
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let dataset = load_data(&cfg.dataset)?;
    let summarize_plan = |b: &ResolvedBackend| BackendSummary {
        id: b.spec.id.clone(),
        role: b.role.clone(),
        protocol: b.assignment.mcq.kind.label(),
        open_ended_protocol: b.assignment.open_ended.kind.label(),
        items: dataset.len(),
        planned_requests: dataset
            .items()
            .iter()
            .map(|i| b.assignment.for_item(i).planned_requests(i))
            .sum(),
        ta: 0,
        vg: 0,
        uncovered: 0,
        ta_pct: 0.0,
        network_calls: 0,
    };
    if cfg.dry_run {
        return Ok(EvalReport {
            dataset: cfg.dataset.display().to_string(),
            dry_run: true,
            backends: cfg.backends.iter().map(summarize_plan).collect(),
        });
    }

    let log = RunLog::open(&cfg.out.join("logs").join("eval.log"), cfg.verbose);
    log.line(&format!("eval {} ({} items)", cfg.dataset.display(), dataset.len()));
    let cache = cfg.out.join("cache");
    let clients: Vec<Client> = cfg
        .backends
        .iter()
        .map(|b| Client::from_spec(b.spec.clone(), Some(ResponseCache::new(&cache)), cfg.verbose))
        .collect::<Result<_, _>>()
        .map_err(CliError::Config)?;
    let pairs: Vec<(&Client, Assignment)> = clients
        .iter()
        .zip(&cfg.backends)
        .map(|(c, b)| (c, b.assignment))
        .collect();
    let opts = AuditOptions {
        workers: cfg.workers,
        eval: cfg.eval.clone(),
    };
    let stores = run_audit(&dataset, &pairs, &opts).map_err(|e| {
        log.line(&format!("failed: {e}"));
        CliError::Internal(e.to_string())
    })?;

    let mut summaries = Vec::new();
    for ((store, client), b) in stores.iter().zip(&clients).zip(&cfg.backends) {
        store
            .write_jsonl(&store_path(&cfg.out, &store.backend_id), cfg.include_raw)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let mut s = summarize_plan(b);
        s.ta = store.ta_count();
        s.uncovered = store.uncovered_count();
        s.vg = store.decisions.len() - s.ta;
        s.ta_pct = analytics::pct(s.ta, store.decisions.len());
        s.network_calls = client.network_calls();
        log.line(&format!(
            "{}: ta={} vg={} uncovered={} calls={}",
            s.id, s.ta, s.vg, s.uncovered, s.network_calls
        ));
        summaries.push(s);
    }
    let report = EvalReport {
        dataset: cfg.dataset.display().to_string(),
        dry_run: false,
        backends: summaries,
    };
    write_file(
        &cfg.out.join("summary.json"),
        (serde_json::to_string_pretty(&report).expect("summary serializes") + "\n").as_bytes(),
    )?;
    let manifest = RunManifest {
        dataset: cfg.dataset.display().to_string(),
        dataset_digest: file_digest(&cfg.dataset)?,
        preset: cfg.preset.map(|p| p.to_string()),
        backends: cfg
            .backends
            .iter()
            .map(|b| RunManifestBackend {
                id: &b.spec.id,
                kind: b.spec.kind,
                model_name: &b.spec.model_name,
                role: b.role.as_deref(),
                protocol: b.assignment.mcq.kind.label(),
                open_ended_protocol: b.assignment.open_ended.kind.label(),
                escalate_on_refusal: b.assignment.mcq.escalate_on_refusal,
                temperature: b.spec.temperature,
                store: format!("decisions/{}.jsonl", b.spec.id),
            })
            .collect(),
        max_uncovered: cfg.max_uncovered,
        include_raw: cfg.include_raw,
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    write_file(
        &cfg.out.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").as_bytes(),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------- filter

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub dataset: PathBuf,
    pub stores: Vec<PathBuf>,
    pub preset: Preset,
    pub threshold: Option<usize>,
    pub max_uncovered: f64,
    pub out: PathBuf,
}

/// Expands directories into the `*.jsonl` files they contain, sorted.
pub fn expand_store_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            require_file("decision store", p)?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no decision stores given".into()));
    }
    Ok(out)
}

pub fn resolve_filter(cli: &Cli, args: &FilterArgs, file: Option<&FileConfig>) -> Result<FilterConfig, CliError> {
    let def = FileConfig::default();
    let f = file.unwrap_or(&def);
    let dataset = args
        .dataset
        .clone()
        .or_else(|| f.dataset.clone())
        .ok_or_else(|| CliError::Config("no dataset given".into()))?;
    let preset = args
        .preset
        .as_deref()
        .or(f.preset.as_deref())
        .ok_or_else(|| CliError::Config("no preset given".into()))
        .and_then(parse_preset)?;
    let mut decisions = args.decisions.clone();
    if decisions.is_empty() {
        decisions = f.decisions.clone();
    }
    if decisions.is_empty() {
        if let Some(run) = &f.out {
            decisions.push(decisions_dir(run));
        }
    }
    let mut out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output path given (--out)".into()))?;
    if out.is_dir() {
        out = out.join("vg.jsonl");
    }
    Ok(FilterConfig {
        dataset,
        stores: decisions,
        preset,
        threshold: args.threshold.or(f.threshold),
        max_uncovered: args.max_uncovered.or(f.max_uncovered).unwrap_or(DEFAULT_MAX_UNCOVERED),
        out,
    })
}

pub fn cmd_filter(cfg: &FilterConfig) -> Result<curation::Manifest, CliError> {
    let dataset = load_data(&cfg.dataset)?;
    let paths = expand_store_paths(&cfg.stores)?;
    let mut digests = BTreeMap::new();
    digests.insert(cfg.dataset.display().to_string(), file_digest(&cfg.dataset)?);
    let mut stores = Vec::new();
    for p in &paths {
        stores.push(DecisionStore::read_jsonl(p).map_err(|e| CliError::Config(e.to_string()))?);
        digests.insert(p.display().to_string(), file_digest(p)?);
    }
    let opts = VariantOptions {
        threshold: cfg.threshold,
        max_uncovered: cfg.max_uncovered,
        input_digests: digests,
    };
    let v = curation::build_variant(cfg.preset, &dataset, &stores, &opts, &cfg.out)?;
    Ok(v.manifest)
}

// ---------------------------------------------------------------- categorize

#[derive(Debug, Clone)]
pub struct CategorizeConfig {
    pub dataset: PathBuf,
    pub store: PathBuf,
    pub judge: BackendSpec,
    pub out: PathBuf,
    pub workers: usize,
    pub verbose: bool,
    pub dry_run: bool,
}

pub fn resolve_categorize(
    cli: &Cli,
    args: &CategorizeArgs,
    file: Option<&FileConfig>,
) -> Result<CategorizeConfig, CliError> {
    let def = FileConfig::default();
    let f = file.unwrap_or(&def);
    let dataset = args
        .dataset
        .clone()
        .or_else(|| f.dataset.clone())
        .ok_or_else(|| CliError::Config("no dataset given".into()))?;
    let mut judge = match &args.judge {
        Some(p) => load_backend_file(p)?,
        None => f
            .judge
            .clone()
            .ok_or_else(|| CliError::Config("no judge backend given".into()))?,
    }
    .spec;
    if let (Some(url), BackendKind::HttpChat) = (&args.base_url, judge.kind) {
        judge.endpoint = Some(url.clone());
    }
    judge.validate().map_err(CliError::Config)?;
    require_file("decision store", &args.decisions)?;
    Ok(CategorizeConfig {
        dataset,
        store: args.decisions.clone(),
        judge,
        out: cli
            .out
            .clone()
            .or_else(|| f.out.clone())
            .ok_or_else(|| CliError::Config("no output directory given (--out)".into()))?,
        workers: args.workers.or(f.workers).unwrap_or(DEFAULT_WORKERS).max(1),
        verbose: cli.verbose,
        dry_run: cli.dry_run,
    })
}

/// Categorizes every TA item of a store; writes `categories.jsonl` under `out`.
pub fn cmd_categorize(cfg: &CategorizeConfig) -> Result<Table, CliError> {
    let dataset = load_data(&cfg.dataset)?;
    let store = DecisionStore::read_jsonl(&cfg.store).map_err(|e| CliError::Config(e.to_string()))?;
    let mut items = Vec::new();
    for d in store.decisions.iter().filter(|d| d.is_ta()) {
        items.push(
            dataset
                .get(&d.item_id)
                .ok_or_else(|| CliError::Config(format!("store item {} is not in the dataset", d.item_id)))?,
        );
    }
    if cfg.dry_run {
        let mut t = Table::new("planned requests (dry run)", &["judge", "TA items", "requests"]);
        t.row(vec![
            cfg.judge.id.clone(),
            items.len().to_string(),
            items.len().to_string(),
        ]);
        return Ok(t);
    }
    let judge = Client::from_spec(
        cfg.judge.clone(),
        Some(ResponseCache::new(cfg.out.join("cache"))),
        cfg.verbose,
    )
    .map_err(CliError::Config)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CategoryOutcome, String>>>> = Mutex::new(vec![None; items.len()]);
    let workers = cfg
        .workers
        .min(judge.spec().rate_limit.ceil().max(1.0) as usize)
        .min(items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = curation::categorize_ta(item, &judge).map_err(|e| e.to_string());
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut lines = String::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (item, slot) in items.iter().zip(slots.into_inner().unwrap()) {
        let outcome = match slot.expect("every item visited") {
            Ok(o) => o,
            Err(e) => return Err(CliError::Internal(format!("judge failed on {}: {e}", item.id))),
        };
        let key = match &outcome {
            CategoryOutcome::Assigned { category, .. } => category.value.to_string(),
            CategoryOutcome::Unassigned { .. } => "unassigned".to_string(),
        };
        *counts.entry(key).or_default() += 1;
        lines.push_str(&serde_json::to_string(&outcome).expect("outcome serializes"));
        lines.push('\n');
    }
    write_file(&cfg.out.join("categories.jsonl"), lines.as_bytes())?;
    let mut t = Table::new(
        format!("TA categories ({} items)", items.len()),
        &["category", "items", "%"],
    );
    for (k, n) in &counts {
        t.row(vec![k.clone(), n.to_string(), fmt1(analytics::pct(*n, items.len()))]);
    }
    Ok(t)
}

// ---------------------------------------------------------------- report

fn read_store(p: &Path) -> Result<DecisionStore, CliError> {
    require_file("decision store", p)?;
    DecisionStore::read_jsonl(p).map_err(|e| CliError::Config(e.to_string()))
}

fn analytics_err(e: analytics::AnalyticsError) -> CliError {
    CliError::Config(e.to_string())
}

fn vg_ids(store: &DecisionStore) -> HashSet<String> {
    store
        .decisions
        .iter()
        .filter(|d| !d.is_ta() && d.coverage == Coverage::Evaluated)
        .map(|d| d.item_id.clone())
        .collect()
}

fn read_id_list(p: &Path) -> Result<HashSet<String>, CliError> {
    let body = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    Ok(body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn cmd_report(kind: &ReportKind) -> Result<Table, CliError> {
    match kind {
        ReportKind::TaRate {
            decisions,
            baseline,
            dataset,
        } => {
            let data = dataset.as_deref().map(load_data).transpose()?;
            let base = match (baseline, &data) {
                (Some(b), _) => RandomBaseline::Constant(*b),
                (None, Some(d)) => RandomBaseline::Computed(d),
                (None, None) => return Err(CliError::Config("ta-rate needs --baseline or --dataset".into())),
            };
            let mut t = Table::new(
                "text-only answerability",
                &["backend", "items", "TA", "TA %", "random %", "delta"],
            );
            for p in decisions {
                let s = read_store(p)?;
                let r = analytics::ta_rate(&s.decisions, base).map_err(analytics_err)?;
                t.row(vec![
                    s.backend_id.clone(),
                    r.total.to_string(),
                    r.ta.to_string(),
                    fmt1(r.ta_pct),
                    fmt1(r.baseline_pct),
                    fmt_delta(r.delta_vs_random),
                ]);
            }
            Ok(t)
        }
        ReportKind::Agreement {
            dataset,
            decisions,
            ids,
        } => {
            let data = load_data(dataset)?;
            let mut sets = Vec::new();
            for p in decisions {
                let s = read_store(p)?;
                sets.push((s.backend_id.clone(), vg_ids(&s)));
            }
            for spec in ids {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("--ids expects NAME=PATH, got {spec}")))?;
                sets.push((name.to_string(), read_id_list(Path::new(path))?));
            }
            let a = analytics::agreement(&data, &sets).map_err(analytics_err)?;
            Ok(agreement_table(&a))
        }
        ReportKind::Passk { decisions } => {
            let s = read_store(decisions)?;
            let r = analytics::passk_histogram(&s.decisions).map_err(analytics_err)?;
            let k = r.overall.k;
            let mut headers: Vec<String> = vec!["split".into(), "items".into()];
            headers.extend((0..=k).map(|c| format!("{c}/{k} %")));
            headers.push("nonzero %".into());
            let hdr: Vec<&str> = headers.iter().map(String::as_str).collect();
            let mut t = Table::new(format!("pass@{k} correct-sample distribution ({})", s.backend_id), &hdr);
            let mut row = |name: String, h: &analytics::PassKHistogram| {
                let mut cells = vec![name, h.count().to_string()];
                cells.extend((0..=k).map(|c| fmt1(h.pct_bin(c))));
                cells.push(fmt1(h.pct_nonzero()));
                t.row(cells);
            };
            for (m, h) in &r.by_modality {
                row(m.to_string(), h);
            }
            row("overall".into(), &r.overall);
            Ok(t)
        }
        ReportKind::Scores { results, dataset, vg } => {
            let full = load_data(dataset)?;
            let sub = load_data(vg)?;
            let vg_set: HashSet<&str> = sub.ids().collect();
            let flags: HashMap<String, bool> = full.ids().map(|id| (id.to_string(), vg_set.contains(id))).collect();
            let mut t = Table::new(
                "accuracy on full and VG items",
                &[
                    "log",
                    "model",
                    "frames",
                    "items",
                    "full %",
                    "VG %",
                    "text-only %",
                    "visual gain",
                ],
            );
            for p in results {
                let f = fs::File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let recs = analytics::parse_result_log(std::io::BufReader::new(f)).map_err(analytics_err)?;
                for d in analytics::decompose_scores(&recs, &flags).map_err(analytics_err)? {
                    t.row(vec![
                        p.file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                        d.model.clone(),
                        d.frames.map(|f| f.to_string()).unwrap_or_else(|| "-".into()),
                        d.n_items.to_string(),
                        fmt1(d.full_avg),
                        d.vg_avg.map(fmt1).unwrap_or_else(|| "-".into()),
                        d.text_only_acc.map(fmt1).unwrap_or_else(|| "-".into()),
                        d.visual_gain.map(fmt_delta).unwrap_or_else(|| "-".into()),
                    ]);
                }
            }
            Ok(t)
        }
        ReportKind::Retention { dataset, subset } => {
            let full = load_data(dataset)?;
            let sub = load_data(subset)?;
            if let Some(bad) = sub.ids().find(|id| full.get(id).is_none()) {
                return Err(CliError::Config(format!("subset item {bad} is not in the dataset")));
            }
            let mut t = Table::new("retention", &["dataset", "total", "kept", "retention", "%"]);
            t.row(vec![
                full.name().to_string(),
                full.len().to_string(),
                sub.len().to_string(),
                format!("{:.3}", retention_ratio(sub.len(), full.len())),
                fmt1(analytics::pct(sub.len(), full.len())),
            ]);
            Ok(t)
        }
        ReportKind::Frames { total, count } => {
            let mut t = Table::new(format!("{count} of {total} frames"), &["i", "frame"]);
            for (i, f) in analytics::frame_indices(*total, *count).into_iter().enumerate() {
                t.row(vec![i.to_string(), f.to_string()]);
            }
            Ok(t)
        }
    }
}

pub fn agreement_table(a: &analytics::AgreementStats) -> Table {
    let mut t = Table::new(
        format!("VG agreement over {} items", a.total),
        &["region", "items", "% of total", "jaccard %"],
    );
    for (name, size) in a.names.iter().zip(&a.sizes) {
        t.row(vec![
            name.clone(),
            size.to_string(),
            fmt1(a.pct_of_total(*size)),
            String::new(),
        ]);
    }
    for p in &a.pairwise {
        t.row(vec![
            format!("{} & {}", p.a, p.b),
            p.intersection.to_string(),
            fmt1(a.pct_of_total(p.intersection)),
            fmt1(100.0 * p.jaccard),
        ]);
    }
    if let Some(n) = a.triple {
        t.row(vec![
            "all three".into(),
            n.to_string(),
            fmt1(a.pct_of_total(n)),
            String::new(),
        ]);
    }
    for (cell, n) in &a.venn {
        let members: Vec<&str> = cell
            .chars()
            .map(|c| a.names[(c as u8 - b'A') as usize].as_str())
            .collect();
        t.row(vec![
            format!("only {}", members.join(" & ")),
            n.to_string(),
            fmt1(a.pct_of_total(*n)),
            String::new(),
        ]);
    }
    t
}

// ---------------------------------------------------------------- grpo-check

pub fn cmd_grpo_check(seed: u64) -> (Table, bool) {
    let results = grpomath::run_property_suite(seed);
    let mut t = Table::new(
        format!("grpo property checks (seed {seed})"),
        &["property", "cases", "worst", "tolerance", "result"],
    );
    for r in &results {
        t.row(vec![
            r.name.to_string(),
            r.cases.to_string(),
            format!("{:.3e}", r.worst),
            format!("{:.0e}", r.tolerance),
            if r.passed { "pass" } else { "FAIL" }.to_string(),
        ]);
    }
    (t, results.iter().all(|r| r.passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_interpolation() {
        std::env::set_var("TA_AUDIT_TEST_KEY", "sk-123");
        assert_eq!(
            interpolate_env("key = \"${TA_AUDIT_TEST_KEY}\"").unwrap(),
            "key = \"sk-123\""
        );
        assert!(interpolate_env("${TA_AUDIT_DEFINITELY_UNSET_VAR}")
            .unwrap_err()
            .contains("TA_AUDIT_DEFINITELY_UNSET_VAR"));
        assert_eq!(interpolate_env("no vars $HOME").unwrap(), "no vars $HOME");
    }

    #[test]
    fn backend_entry_parses_with_protocol_fields() {
        let e: BackendEntry = toml::from_str(
            r#"
id = "gpt"
kind = "http-chat"
endpoint = "http://localhost:1/v1"
model_name = "m"
role = "gpt"
protocol = "circular:3"
rate_limit = 2.5
"#,
        )
        .unwrap();
        assert_eq!(e.spec.rate_limit, 2.5);
        assert_eq!(e.spec.max_retries, 5);
        assert_eq!(e.protocol.as_deref(), Some("circular:3"));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("datset = \"x\"").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Coverage(String::new()).exit_code(), 3);
        assert_eq!(CliError::Internal(String::new()).exit_code(), 1);
        assert_eq!(run(["ta-audit", "frobnicate"]), 2);
    }

    #[test]
    fn grpo_check_passes() {
        let (t, ok) = cmd_grpo_check(grpomath::DEFAULT_SEED);
        assert!(ok, "{}", t.render());
    }
}
