//! TA-detection protocols and per-model item decisions.
//!
//! - single-pass: one trial on the item as given; TA iff correct.
//! - circular:N: trials on rotations `k = 0..N`; TA iff every rotation is answered correctly.
//! - pass@K: K independent samples; TA iff at least one is correct.
//!
//! A backend failure that is not a setup error marks the decision uncovered, which
//! counts as VG.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Client, CompletionRequest, TrialContext};
use crate::corpus::{Dataset, Modality, QAItem};
use crate::extraction::{ExtractedAnswer, ProtocolTrial, RefusalLexicon, Verdict};
use crate::prompting::{permute_options, render_prompt, Presented, PromptError, PromptTemplate, TemplateName};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad protocol `{0}` (expected single, circular:N or pass@K)")]
    Parse(String),
    #[error("protocol {protocol} cannot run on open-ended item \"{item_id}\"")]
    Incompatible { protocol: String, item_id: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend {backend}: {source}")]
    Fatal {
        backend: String,
        #[source]
        source: BackendError,
    },
    #[error("{path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolKind {
    SinglePass,
    Circular { n_permutations: usize },
    PassAtK { k: usize },
}

impl ProtocolKind {
    pub fn label(&self) -> String {
        match self {
            ProtocolKind::SinglePass => "single".into(),
            ProtocolKind::Circular { n_permutations } => format!("circular:{n_permutations}"),
            ProtocolKind::PassAtK { k } => format!("pass@{k}"),
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = ProtocolError;

    /// Accepts `single`, `single-pass`, `circular:N`, `pass@K` and `pass-at-k:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProtocolError::Parse(s.to_string());
        let s_trim = s.trim();
        let positive = |n: &str| n.trim().parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(bad);
        if s_trim == "single" || s_trim == "single-pass" {
            Ok(ProtocolKind::SinglePass)
        } else if let Some(n) = s_trim.strip_prefix("circular:") {
            Ok(ProtocolKind::Circular {
                n_permutations: positive(n)?,
            })
        } else if let Some(k) = s_trim
            .strip_prefix("pass@")
            .or_else(|| s_trim.strip_prefix("pass-at-k:"))
        {
            Ok(ProtocolKind::PassAtK { k: positive(k)? })
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub template: TemplateName,
    /// Re-ask refusing trials once with the enhanced template.
    pub escalate_on_refusal: bool,
    /// Circular only: keep asking after the first wrong rotation.
    pub all_trials: bool,
}

impl ProtocolSpec {
    pub fn new(kind: ProtocolKind) -> Self {
        Self {
            kind,
            template: TemplateName::Default,
            escalate_on_refusal: false,
            all_trials: false,
        }
    }

    pub fn single() -> Self {
        Self::new(ProtocolKind::SinglePass)
    }

    pub fn circular(n: usize) -> Self {
        Self::new(ProtocolKind::Circular { n_permutations: n })
    }

    pub fn pass_at_k(k: usize) -> Self {
        Self::new(ProtocolKind::PassAtK { k })
    }

    pub fn with_escalation(mut self, on: bool) -> Self {
        self.escalate_on_refusal = on;
        self
    }

    pub fn with_all_trials(mut self, on: bool) -> Self {
        self.all_trials = on;
        self
    }

    pub fn with_template(mut self, t: TemplateName) -> Self {
        self.template = t;
        self
    }

    /// Number of backend requests this protocol issues for `item`, escalations excluded.
    pub fn planned_requests(&self, item: &QAItem) -> usize {
        match self.kind {
            ProtocolKind::SinglePass => 1,
            ProtocolKind::Circular { n_permutations } => n_permutations.min(item.options.len()),
            ProtocolKind::PassAtK { k } => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    TA,
    VG,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coverage {
    Evaluated,
    Uncovered,
}

/// One model's TA/VG call on one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDecision {
    pub item_id: String,
    pub backend_id: String,
    /// Protocol actually applied to this item.
    pub protocol: String,
    pub modality: Modality,
    pub mcq: bool,
    pub trials: Vec<Verdict>,
    /// Original verdicts replaced by an escalated re-ask.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub escalated_from: Vec<Verdict>,
    pub n_correct: usize,
    pub label: Label,
    pub coverage: Coverage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ItemDecision {
    pub fn is_ta(&self) -> bool {
        self.label == Label::TA
    }

    /// A decision carrying no trials, counted as VG.
    pub fn uncovered(item: &QAItem, backend_id: &str, protocol: &str, error: String) -> Self {
        Self {
            item_id: item.id.clone(),
            backend_id: backend_id.to_string(),
            protocol: protocol.to_string(),
            modality: item.modality,
            mcq: item.is_mcq(),
            trials: Vec::new(),
            escalated_from: Vec::new(),
            n_correct: 0,
            label: Label::VG,
            coverage: Coverage::Uncovered,
            error: Some(error),
        }
    }
}

/// Runs one trial; escalates a refusal once when asked to.
fn run_trial(
    presented: &impl Presented,
    client: &Client,
    spec: &ProtocolSpec,
    index: usize,
    sample_index: usize,
    lexicon: &RefusalLexicon,
    templates: &TemplateSet,
) -> Result<(Verdict, Option<Verdict>), BackendError> {
    let ask = |template: &PromptTemplate| -> Result<Verdict, BackendError> {
        let prompt = render_prompt(presented, template).expect("items are validated before prompting");
        let req = CompletionRequest {
            prompt,
            sample_index,
            context: TrialContext {
                item_id: presented.item_id().to_string(),
                index,
                template: Some(template.name),
                gold: match presented.gold() {
                    crate::prompting::PresentedGold::Option(_) => presented.gold_letter().map(String::from),
                    crate::prompting::PresentedGold::Text(t) => Some(t.to_string()),
                },
                is_mcq: presented.is_mcq(),
            },
        };
        let raw = client.complete(&req)?;
        let trial = ProtocolTrial {
            protocol: spec.kind.label(),
            index,
            template: template.name,
        };
        Ok(Verdict::evaluate(presented, client.id(), trial, raw, lexicon))
    };
    let first = ask(templates.get(spec.template))?;
    if spec.escalate_on_refusal && first.refused && spec.template == TemplateName::Default {
        let second = ask(templates.get(TemplateName::Enhanced))?;
        return Ok((second, Some(first)));
    }
    Ok((first, None))
}

/// The default and enhanced templates in effect for a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    default: PromptTemplate,
    enhanced: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            default: PromptTemplate::builtin(TemplateName::Default),
            enhanced: PromptTemplate::builtin(TemplateName::Enhanced),
        }
    }
}

impl TemplateSet {
    pub fn with(mut self, template: PromptTemplate) -> Self {
        match template.name {
            TemplateName::Default => self.default = template,
            TemplateName::Enhanced => self.enhanced = template,
        }
        self
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        match name {
            TemplateName::Default => &self.default,
            TemplateName::Enhanced => &self.enhanced,
        }
    }
}

/// Evaluation context shared by all items of a run.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub lexicon: RefusalLexicon,
    pub templates: TemplateSet,
}

/// Runs one protocol for one item against one backend.
pub fn run_protocol(
    item: &QAItem,
    client: &Client,
    spec: &ProtocolSpec,
    ctx: &EvalContext,
) -> Result<ItemDecision, ProtocolError> {
    let label_str = spec.kind.label();
    if matches!(spec.kind, ProtocolKind::Circular { .. }) && !item.is_mcq() {
        return Err(ProtocolError::Incompatible {
            protocol: label_str,
            item_id: item.id.clone(),
        });
    }
    if item.options.len() > crate::corpus::MAX_OPTIONS {
        return Err(PromptError::TooManyOptions(item.options.len()).into());
    }

    let mut trials = Vec::new();
    let mut escalated_from = Vec::new();
    let mut record = |outcome: Result<(Verdict, Option<Verdict>), BackendError>| -> Result<bool, BackendError> {
        let (v, original) = outcome?;
        let correct = v.correct;
        trials.push(v);
        escalated_from.extend(original);
        Ok(correct)
    };

    let result: Result<(), BackendError> = (|| {
        match spec.kind {
            ProtocolKind::SinglePass => {
                record(run_trial(item, client, spec, 0, 0, &ctx.lexicon, &ctx.templates))?;
            }
            ProtocolKind::Circular { n_permutations } => {
                let n = n_permutations.min(item.options.len());
                for k in 0..n {
                    let permuted = permute_options(item, k).expect("checked MCQ above");
                    let correct = record(run_trial(&permuted, client, spec, k, 0, &ctx.lexicon, &ctx.templates))?;
                    if !correct && !spec.all_trials {
                        break;
                    }
                }
            }
            ProtocolKind::PassAtK { k } => {
                for s in 0..k {
                    record(run_trial(item, client, spec, s, s, &ctx.lexicon, &ctx.templates))?;
                }
            }
        }
        Ok(())
    })();

    if let Err(e) = result {
        if e.is_fatal() {
            return Err(ProtocolError::Fatal {
                backend: client.id().to_string(),
                source: e,
            });
        }
        return Ok(ItemDecision::uncovered(item, client.id(), &label_str, e.to_string()));
    }

    let n_correct = trials.iter().filter(|v| v.correct).count();
    let ta = match spec.kind {
        ProtocolKind::SinglePass => n_correct == 1,
        ProtocolKind::Circular { n_permutations } => {
            n_correct == n_permutations.min(item.options.len()) && trials.iter().all(|v| v.correct)
        }
        ProtocolKind::PassAtK { .. } => n_correct > 0,
    };
    Ok(ItemDecision {
        item_id: item.id.clone(),
        backend_id: client.id().to_string(),
        protocol: label_str,
        modality: item.modality,
        mcq: item.is_mcq(),
        trials,
        escalated_from,
        n_correct,
        label: if ta { Label::TA } else { Label::VG },
        coverage: Coverage::Evaluated,
        error: None,
    })
}

/// Protocols one backend applies: `mcq` to items with options, `open_ended` to the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub mcq: ProtocolSpec,
    pub open_ended: ProtocolSpec,
}

impl Assignment {
    pub fn uniform(spec: ProtocolSpec) -> Self {
        let open_ended = match spec.kind {
            ProtocolKind::Circular { .. } => ProtocolSpec {
                kind: ProtocolKind::SinglePass,
                ..spec
            },
            _ => spec,
        };
        Self { mcq: spec, open_ended }
    }

    pub fn for_item(&self, item: &QAItem) -> &ProtocolSpec {
        if item.is_mcq() {
            &self.mcq
        } else {
            &self.open_ended
        }
    }
}

pub const DEFAULT_WORKERS: usize = 8;

/// One backend's decisions over a dataset, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionStore {
    pub backend_id: String,
    pub decisions: Vec<ItemDecision>,
}

impl DecisionStore {
    pub fn uncovered_count(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.coverage == Coverage::Uncovered)
            .count()
    }

    pub fn ta_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.is_ta()).count()
    }

    /// Protocol labels applied to MCQ and open-ended items, respectively.
    pub fn protocols(&self) -> (Vec<String>, Vec<String>) {
        let mut mcq: Vec<String> = Vec::new();
        let mut open: Vec<String> = Vec::new();
        for d in &self.decisions {
            let bucket = if d.mcq { &mut mcq } else { &mut open };
            if !bucket.contains(&d.protocol) {
                bucket.push(d.protocol.clone());
            }
        }
        (mcq, open)
    }

    /// JSONL, one decision per line. `include_raw = false` blanks response text.
    pub fn write_jsonl(&self, path: &Path, include_raw: bool) -> Result<(), ProtocolError> {
        let err = |e: std::io::Error| ProtocolError::Store {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
        let mut w = BufWriter::new(tmp);
        for d in &self.decisions {
            let line = if include_raw {
                serde_json::to_string(d)
            } else {
                serde_json::to_string(&strip_raw(d.clone()))
            }
            .expect("decision serialization is infallible");
            writeln!(w, "{line}").map_err(err)?;
        }
        let tmp = w.into_inner().map_err(|e| err(e.into_error()))?;
        tmp.persist(path).map_err(|e| err(e.error))?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, ProtocolError> {
        let err = |message: String| ProtocolError::Store {
            path: path.display().to_string(),
            message,
        };
        let f = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut decisions = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: ItemDecision = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            decisions.push(d);
        }
        let backend_id = decisions.first().map(|d| d.backend_id.clone()).unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        if let Some(bad) = decisions.iter().find(|d| d.backend_id != backend_id) {
            return Err(err(format!(
                "mixed backends in one store: {} and {}",
                backend_id, bad.backend_id
            )));
        }
        Ok(Self { backend_id, decisions })
    }
}

fn strip_raw(mut d: ItemDecision) -> ItemDecision {
    for v in d.trials.iter_mut().chain(d.escalated_from.iter_mut()) {
        v.raw.text.clear();
        match &mut v.extracted {
            ExtractedAnswer::Refusal { raw } | ExtractedAnswer::Unparsable { raw } => raw.clear(),
            _ => {}
        }
    }
    d
}

/// Options for [`run_audit`].
#[derive(Debug, Clone)]
pub struct AuditOptions {
    pub workers: usize,
    pub eval: EvalContext,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            workers: DEFAULT_WORKERS,
            eval: EvalContext::default(),
        }
    }
}

/// Evaluates every item against every backend. Each backend gets its own bounded
/// worker pool; results are gathered in dataset order.
pub fn run_audit(
    dataset: &Dataset,
    backends: &[(&Client, Assignment)],
    opts: &AuditOptions,
) -> Result<Vec<DecisionStore>, ProtocolError> {
    for (_, a) in backends {
        if matches!(a.open_ended.kind, ProtocolKind::Circular { .. }) {
            return Err(ProtocolError::Parse(format!(
                "{} is not usable for open-ended items",
                a.open_ended.kind
            )));
        }
    }
    let items = dataset.items();
    std::thread::scope(|scope| {
        let handles: Vec<_> = backends
            .iter()
            .map(|(client, assignment)| {
                let workers = opts
                    .workers
                    .max(1)
                    .min(client.spec().rate_limit.ceil().max(1.0) as usize)
                    .min(items.len().max(1));
                scope.spawn(move || audit_one_backend(items, client, assignment, &opts.eval, workers))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("audit worker panicked"))
            .collect()
    })
}

fn audit_one_backend(
    items: &[QAItem],
    client: &Client,
    assignment: &Assignment,
    ctx: &EvalContext,
    workers: usize,
) -> Result<DecisionStore, ProtocolError> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<ItemDecision>>> = Mutex::new(vec![None; items.len()]);
    let failure: Mutex<Option<ProtocolError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                while !stop.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(item) = items.get(i) else { break };
                    match run_protocol(item, client, assignment.for_item(item), ctx) {
                        Ok(d) => slots.lock().unwrap()[i] = Some(d),
                        Err(e) => {
                            stop.store(true, Ordering::Relaxed);
                            failure.lock().unwrap().get_or_insert(e);
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let decisions = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|d| d.expect("every item decided"))
        .collect();
    Ok(DecisionStore {
        backend_id: client.id().to_string(),
        decisions,
    })
}
