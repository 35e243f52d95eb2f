//! Cross-model consensus, VG dataset variants and TA categorization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Client, CompletionRequest, TrialContext};
use crate::corpus::{write_subset, CorpusError, Dataset, QAItem};
use crate::prompting::{format_options, option_letter};
use crate::protocols::{Coverage, DecisionStore, ItemDecision, Label, ProtocolKind};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("item \"{item_id}\": no vote from backend {backend_id}")]
    MissingVote { item_id: String, backend_id: String },
    #[error("preset {preset}: no decision store matches slot `{slot}` ({protocols})")]
    NoStoreForSlot {
        preset: String,
        slot: String,
        protocols: String,
    },
    #[error("preset {preset}: slot `{slot}` matches several stores: {candidates}")]
    AmbiguousSlot {
        preset: String,
        slot: String,
        candidates: String,
    },
    #[error("uncovered fraction {fraction:.4} exceeds the limit {limit:.4} ({uncovered} of {total} items)")]
    CoverageGap {
        uncovered: usize,
        total: usize,
        fraction: f64,
        limit: f64,
    },
    #[error("decision for unknown item \"{0}\"")]
    UnknownItem(String),
    #[error("unknown preset `{0}` (expected vidground, m1 or m2)")]
    UnknownPreset(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vote {
    TA,
    VG,
    #[serde(rename = "uncovered")]
    Uncovered,
}

impl Vote {
    pub fn of(decision: &ItemDecision) -> Self {
        match (decision.coverage, decision.label) {
            (Coverage::Uncovered, _) => Vote::Uncovered,
            (Coverage::Evaluated, Label::TA) => Vote::TA,
            (Coverage::Evaluated, Label::VG) => Vote::VG,
        }
    }
}

/// Cross-model keep/drop call for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusDecision {
    pub item_id: String,
    pub votes: BTreeMap<String, Vote>,
    /// TA votes; uncovered counts as a VG vote.
    pub n_models_correct: usize,
    pub threshold: usize,
    /// Retained as VG iff fewer than `threshold` models answered correctly.
    pub retained: bool,
}

pub const DEFAULT_THRESHOLD: usize = 2;

/// Combines one vote per expected backend into a retain/drop decision.
pub fn consensus(
    item_id: &str,
    votes: BTreeMap<String, Vote>,
    expected_backends: &[String],
    threshold: usize,
) -> Result<ConsensusDecision, CurationError> {
    if let Some(missing) = expected_backends.iter().find(|b| !votes.contains_key(*b)) {
        return Err(CurationError::MissingVote {
            item_id: item_id.to_string(),
            backend_id: missing.clone(),
        });
    }
    let n_models_correct = votes.values().filter(|v| **v == Vote::TA).count();
    Ok(ConsensusDecision {
        item_id: item_id.to_string(),
        votes,
        n_models_correct,
        threshold,
        retained: n_models_correct < threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Vidground,
    M1,
    M2,
}

impl std::str::FromStr for Preset {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vidground" => Ok(Preset::Vidground),
            "m1" => Ok(Preset::M1),
            "m2" => Ok(Preset::M2),
            other => Err(CurationError::UnknownPreset(other.to_string())),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Vidground => "vidground",
            Preset::M1 => "m1",
            Preset::M2 => "m2",
        })
    }
}

/// One model role in a preset with the protocols it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetSlot {
    pub role: &'static str,
    pub mcq: ProtocolKind,
    pub open_ended: ProtocolKind,
}

/// Role names used by presets. Backends declare one in their config.
pub const ROLE_GPT: &str = "gpt";
pub const ROLE_QWEN: &str = "qwen";
pub const ROLE_GEMINI: &str = "gemini";

impl Preset {
    /// Per-role protocol assignments.
    ///
    /// vidground: GPT single-pass on everything.
    /// m1: GPT single-pass; Qwen circular-2 with pass@10 for open-ended; Gemini circular-3 with
    /// single-pass for open-ended. m2: as m1 with circular-4 for Qwen.
    pub fn slots(self) -> Vec<PresetSlot> {
        let gpt = PresetSlot {
            role: ROLE_GPT,
            mcq: ProtocolKind::SinglePass,
            open_ended: ProtocolKind::SinglePass,
        };
        let qwen = |n| PresetSlot {
            role: ROLE_QWEN,
            mcq: ProtocolKind::Circular { n_permutations: n },
            open_ended: ProtocolKind::PassAtK { k: 10 },
        };
        let gemini = PresetSlot {
            role: ROLE_GEMINI,
            mcq: ProtocolKind::Circular { n_permutations: 3 },
            open_ended: ProtocolKind::SinglePass,
        };
        match self {
            Preset::Vidground => vec![gpt],
            Preset::M1 => vec![gpt, qwen(2), gemini],
            Preset::M2 => vec![gpt, qwen(4), gemini],
        }
    }

    pub fn threshold(self) -> usize {
        match self {
            Preset::Vidground => 1,
            Preset::M1 | Preset::M2 => DEFAULT_THRESHOLD,
        }
    }

    pub fn slot(self, role: &str) -> Option<PresetSlot> {
        self.slots().into_iter().find(|s| s.role == role)
    }
}

fn store_fits_slot(store: &DecisionStore, slot: &PresetSlot) -> bool {
    let (mcq, open) = store.protocols();
    mcq.iter().all(|p| *p == slot.mcq.label()) && open.iter().all(|p| *p == slot.open_ended.label())
}

/// Picks one store per preset slot by matching the protocols the store records.
pub fn match_stores(
    preset: Preset,
    stores: &[DecisionStore],
) -> Result<Vec<(PresetSlot, &DecisionStore)>, CurationError> {
    let mut out = Vec::new();
    for slot in preset.slots() {
        let hits: Vec<&DecisionStore> = stores.iter().filter(|s| store_fits_slot(s, &slot)).collect();
        match hits.as_slice() {
            [one] => out.push((slot, *one)),
            [] => {
                return Err(CurationError::NoStoreForSlot {
                    preset: preset.to_string(),
                    slot: slot.role.to_string(),
                    protocols: format!("{} / {}", slot.mcq, slot.open_ended),
                })
            }
            many => {
                return Err(CurationError::AmbiguousSlot {
                    preset: preset.to_string(),
                    slot: slot.role.to_string(),
                    candidates: many
                        .iter()
                        .map(|s| s.backend_id.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBackend {
    pub id: String,
    pub role: String,
    pub protocol: String,
    pub open_ended_protocol: String,
}

/// Record of how a VG variant was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: Preset,
    pub backends: Vec<ManifestBackend>,
    pub threshold: usize,
    pub total: usize,
    pub retained: usize,
    /// `retained / total`, 3 decimals.
    pub retention_rate: f64,
    /// Items with at least one uncovered (or missing) vote.
    pub uncovered: usize,
    pub timestamp: String,
    pub input_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct VariantOptions {
    pub threshold: Option<usize>,
    pub max_uncovered: f64,
    pub input_digests: BTreeMap<String, String>,
}

impl Default for VariantOptions {
    fn default() -> Self {
        Self {
            threshold: None,
            max_uncovered: 1.0,
            input_digests: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub manifest: Manifest,
    pub decisions: Vec<ConsensusDecision>,
    pub kept: BTreeSet<String>,
}

/// Consensus over a dataset for a preset without writing anything.
pub fn compute_variant(
    preset: Preset,
    dataset: &Dataset,
    stores: &[DecisionStore],
    opts: &VariantOptions,
) -> Result<Variant, CurationError> {
    let matched = match_stores(preset, stores)?;
    let threshold = opts.threshold.unwrap_or_else(|| preset.threshold());
    let known: std::collections::HashSet<&str> = dataset.ids().collect();
    let mut by_backend: Vec<HashMap<&str, Vote>> = Vec::with_capacity(matched.len());
    for (_, store) in &matched {
        let mut votes = HashMap::with_capacity(store.decisions.len());
        for d in &store.decisions {
            if !known.contains(d.item_id.as_str()) {
                return Err(CurationError::UnknownItem(d.item_id.clone()));
            }
            votes.insert(d.item_id.as_str(), Vote::of(d));
        }
        by_backend.push(votes);
    }
    let expected: Vec<String> = matched.iter().map(|(_, s)| s.backend_id.clone()).collect();

    let mut decisions = Vec::with_capacity(dataset.len());
    let mut kept = BTreeSet::new();
    let mut uncovered = 0;
    for item in dataset.items() {
        let votes: BTreeMap<String, Vote> = expected
            .iter()
            .zip(&by_backend)
            .map(|(id, votes)| {
                (
                    id.clone(),
                    votes.get(item.id.as_str()).copied().unwrap_or(Vote::Uncovered),
                )
            })
            .collect();
        if votes.values().any(|v| *v == Vote::Uncovered) {
            uncovered += 1;
        }
        let c = consensus(&item.id, votes, &expected, threshold)?;
        if c.retained {
            kept.insert(item.id.clone());
        }
        decisions.push(c);
    }
    let total = dataset.len();
    let fraction = if total == 0 {
        0.0
    } else {
        uncovered as f64 / total as f64
    };
    if fraction > opts.max_uncovered {
        return Err(CurationError::CoverageGap {
            uncovered,
            total,
            fraction,
            limit: opts.max_uncovered,
        });
    }
    let manifest = Manifest {
        preset,
        backends: matched
            .iter()
            .map(|(slot, store)| ManifestBackend {
                id: store.backend_id.clone(),
                role: slot.role.to_string(),
                protocol: slot.mcq.label(),
                open_ended_protocol: slot.open_ended.label(),
            })
            .collect(),
        threshold,
        total,
        retained: kept.len(),
        retention_rate: crate::corpus::retention_ratio(kept.len(), total),
        uncovered,
        timestamp: chrono::Utc::now().to_rfc3339(),
        input_digests: opts.input_digests.clone(),
    };
    Ok(Variant {
        manifest,
        decisions,
        kept,
    })
}

/// `vg.jsonl` -> `vg.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Computes a preset's consensus and writes the VG dataset plus its manifest.
pub fn build_variant(
    preset: Preset,
    dataset: &Dataset,
    stores: &[DecisionStore],
    opts: &VariantOptions,
    out: &Path,
) -> Result<Variant, CurationError> {
    let variant = compute_variant(preset, dataset, stores, opts)?;
    write_subset(dataset, &variant.kept, out)?;
    let mpath = manifest_path(out);
    let body = serde_json::to_string_pretty(&variant.manifest).expect("manifest serializes");
    std::fs::write(&mpath, body + "\n").map_err(|source| CurationError::Io { path: mpath, source })?;
    Ok(variant)
}

/// The four kinds of text-only shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaCategoryKind {
    TextualShortcut,
    ExternalKnowledge,
    InferentialElimination,
    ImaginedContent,
}

impl TaCategoryKind {
    pub const ALL: [TaCategoryKind; 4] = [
        TaCategoryKind::TextualShortcut,
        TaCategoryKind::ExternalKnowledge,
        TaCategoryKind::InferentialElimination,
        TaCategoryKind::ImaginedContent,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TaCategoryKind::TextualShortcut => "textual-shortcut",
            TaCategoryKind::ExternalKnowledge => "external-knowledge",
            TaCategoryKind::InferentialElimination => "inferential-elimination",
            TaCategoryKind::ImaginedContent => "imagined-content",
        }
    }

    fn definition(self) -> &'static str {
        match self {
            TaCategoryKind::TextualShortcut => {
                "the question or options contain surface wording that gives the answer away \
                 (e.g. a verb in the question implies the matching option)"
            }
            TaCategoryKind::ExternalKnowledge => "commonsense or world knowledge alone is enough to pick the answer",
            TaCategoryKind::InferentialElimination => {
                "the other options can be ruled out as implausible, leaving one logical choice"
            }
            TaCategoryKind::ImaginedContent => {
                "a typical scene imagined from the question alone happens to match the answer"
            }
        }
    }
}

impl std::fmt::Display for TaCategoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaCategory {
    pub value: TaCategoryKind,
    pub rationale: String,
}

/// Result of asking the judge about one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CategoryOutcome {
    Assigned { item_id: String, category: TaCategory },
    Unassigned { item_id: String, responses: Vec<String> },
}

/// Forced-choice judge prompt for one TA item.
pub fn category_prompt(item: &QAItem) -> String {
    let mut p = String::from(
        "The following question about a video or image was answered correctly by a model that \
         could not see the visual content. Classify why it was answerable from text alone.\n\n",
    );
    p.push_str("Question: ");
    p.push_str(&item.question);
    p.push('\n');
    match item.gold.index() {
        Some(i) => {
            p.push_str(&format_options(&item.options).expect("validated items have <= 26 options"));
            p.push_str(&format!(
                "\nCorrect answer: {}. {}\n",
                option_letter(i).unwrap_or('?'),
                item.options[i]
            ));
        }
        None => {
            p.push_str(&format!("Correct answer: {}\n", item.gold.text().unwrap_or("")));
        }
    }
    p.push_str("\nCategories:\n");
    for kind in TaCategoryKind::ALL {
        p.push_str(&format!("- {}: {}\n", kind.label(), kind.definition()));
    }
    p.push_str(
        "\nChoose exactly one category. Give a one-sentence rationale, then finish with a final \
         line of the form \"Category: <category>\" using one of the four names above.",
    );
    p
}

/// Last category name mentioned in a judge reply. Spaces and underscores are accepted
/// in place of hyphens.
pub fn parse_category(reply: &str) -> Option<TaCategoryKind> {
    let folded = reply.to_lowercase().replace(['_', ' '], "-");
    TaCategoryKind::ALL
        .iter()
        .filter_map(|k| folded.rfind(k.label()).map(|pos| (pos, *k)))
        .max_by_key(|(pos, _)| *pos)
        .map(|(_, k)| k)
}

fn rationale_of(reply: &str) -> String {
    reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.to_lowercase().starts_with("category"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Asks the judge to classify a TA item; retries once with a fresh sample if unparsable.
pub fn categorize_ta(item: &QAItem, judge: &Client) -> Result<CategoryOutcome, BackendError> {
    let prompt = category_prompt(item);
    let mut responses = Vec::new();
    for attempt in 0..2 {
        let req = CompletionRequest {
            prompt: prompt.clone(),
            sample_index: attempt,
            context: TrialContext {
                item_id: item.id.clone(),
                index: attempt,
                template: None,
                gold: None,
                is_mcq: item.is_mcq(),
            },
        };
        let raw = judge.complete(&req)?;
        if let Some(value) = parse_category(&raw.text) {
            return Ok(CategoryOutcome::Assigned {
                item_id: item.id.clone(),
                category: TaCategory {
                    value,
                    rationale: rationale_of(&raw.text),
                },
            });
        }
        responses.push(raw.text);
    }
    Ok(CategoryOutcome::Unassigned {
        item_id: item.id.clone(),
        responses,
    })
}
