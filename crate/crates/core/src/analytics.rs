//! Diagnostic statistics over decision stores and external result logs.
//!
//! Percentages are in `[0, 100]`; [`round1`] gives the one-decimal form used in reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Modality};
use crate::protocols::ItemDecision;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no decisions to aggregate")]
    Empty,
    #[error("id \"{0}\" is not in the dataset")]
    UnknownId(String),
    #[error("agreement needs 2 or 3 sets, got {0}")]
    SetCount(usize),
    #[error("decisions mix pass@k values: {0} and {1}")]
    MixedK(usize, usize),
    #[error("decision for \"{item_id}\" used protocol {protocol}, not pass@k")]
    NotPassAtK { item_id: String, protocol: String },
    #[error("item \"{0}\" in the result log has no VG flag")]
    MissingFlag(String),
    #[error("model {model}: text-only and with-video logs cover different items")]
    MismatchedLogs { model: String },
    #[error("result log line {line}: {message}")]
    BadLog { line: usize, message: String },
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// How the chance-level accuracy is obtained.
#[derive(Debug, Clone, Copy)]
pub enum RandomBaseline<'a> {
    /// A published per-benchmark constant, in percent.
    Constant(f64),
    /// Mean over items of `1 / |options|`, with 0 for open-ended items.
    Computed(&'a Dataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaRate {
    pub total: usize,
    pub ta: usize,
    pub ta_pct: f64,
    pub baseline_pct: f64,
    pub delta_vs_random: f64,
}

pub fn ta_rate(decisions: &[ItemDecision], baseline: RandomBaseline<'_>) -> Result<TaRate, AnalyticsError> {
    if decisions.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let ta = decisions.iter().filter(|d| d.is_ta()).count();
    let ta_pct = pct(ta, decisions.len());
    let baseline_pct = match baseline {
        RandomBaseline::Constant(b) => b,
        RandomBaseline::Computed(ds) => {
            let by_id: HashMap<&str, usize> = ds.items().iter().map(|i| (i.id.as_str(), i.options.len())).collect();
            let mut sum = 0.0;
            for d in decisions {
                let n = *by_id
                    .get(d.item_id.as_str())
                    .ok_or_else(|| AnalyticsError::UnknownId(d.item_id.clone()))?;
                if n > 0 {
                    sum += 1.0 / n as f64;
                }
            }
            100.0 * sum / decisions.len() as f64
        }
    };
    Ok(TaRate {
        total: decisions.len(),
        ta,
        ta_pct,
        baseline_pct,
        delta_vs_random: ta_pct - baseline_pct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub a: String,
    pub b: String,
    pub intersection: usize,
    pub union: usize,
    pub jaccard: f64,
}

/// Exclusive region sizes of a Venn diagram, keyed by membership pattern
/// (e.g. `"AB"` = in A and B but not C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub total: usize,
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub pairwise: Vec<PairStats>,
    pub triple: Option<usize>,
    pub union: usize,
    pub venn: BTreeMap<String, usize>,
}

impl AgreementStats {
    pub fn pct_of_total(&self, n: usize) -> f64 {
        pct(n, self.total)
    }
}

/// Overlap statistics for 2 or 3 named id-sets drawn from `universe`.
pub fn agreement(universe: &Dataset, sets: &[(String, HashSet<String>)]) -> Result<AgreementStats, AnalyticsError> {
    let ids: HashSet<&str> = universe.ids().collect();
    agreement_over(&ids, sets)
}

pub fn agreement_over(
    universe: &HashSet<&str>,
    sets: &[(String, HashSet<String>)],
) -> Result<AgreementStats, AnalyticsError> {
    if !(2..=3).contains(&sets.len()) {
        return Err(AnalyticsError::SetCount(sets.len()));
    }
    for (_, s) in sets {
        if let Some(bad) = s.iter().find(|id| !universe.contains(id.as_str())) {
            return Err(AnalyticsError::UnknownId(bad.clone()));
        }
    }
    // membership mask per id
    let mut masks: HashMap<&str, u8> = HashMap::new();
    for (bit, (_, s)) in sets.iter().enumerate() {
        for id in s {
            *masks.entry(id.as_str()).or_default() |= 1 << bit;
        }
    }
    let letters = ['A', 'B', 'C'];
    let mut venn = BTreeMap::new();
    for mask in 1u8..(1 << sets.len()) {
        let key: String = (0..sets.len())
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| letters[b])
            .collect();
        venn.insert(key, masks.values().filter(|m| **m == mask).count());
    }
    let mut pairwise = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let (a, b) = (&sets[i].1, &sets[j].1);
            let intersection = a.iter().filter(|id| b.contains(*id)).count();
            let union = a.len() + b.len() - intersection;
            pairwise.push(PairStats {
                a: sets[i].0.clone(),
                b: sets[j].0.clone(),
                intersection,
                union,
                jaccard: if union == 0 {
                    1.0
                } else {
                    intersection as f64 / union as f64
                },
            });
        }
    }
    let full = (1u8 << sets.len()) - 1;
    let triple = (sets.len() == 3).then(|| masks.values().filter(|m| **m == full).count());
    Ok(AgreementStats {
        total: universe.len(),
        names: sets.iter().map(|(n, _)| n.clone()).collect(),
        sizes: sets.iter().map(|(_, s)| s.len()).collect(),
        pairwise,
        triple,
        union: masks.len(),
        venn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassKHistogram {
    pub k: usize,
    /// `bins[c]` = items with exactly `c` correct samples.
    pub bins: Vec<usize>,
}

impl PassKHistogram {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            bins: vec![0; k + 1],
        }
    }

    pub fn count(&self) -> usize {
        self.bins.iter().sum()
    }

    pub fn pct_bin(&self, c: usize) -> f64 {
        pct(self.bins.get(c).copied().unwrap_or(0), self.count())
    }

    pub fn pct_zero(&self) -> f64 {
        self.pct_bin(0)
    }

    pub fn pct_all(&self) -> f64 {
        self.pct_bin(self.k)
    }

    pub fn pct_nonzero(&self) -> f64 {
        pct(self.count() - self.bins[0], self.count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassKReport {
    pub overall: PassKHistogram,
    pub by_modality: BTreeMap<Modality, PassKHistogram>,
}

fn pass_k_of(d: &ItemDecision) -> Result<usize, AnalyticsError> {
    d.protocol
        .strip_prefix("pass@")
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| AnalyticsError::NotPassAtK {
            item_id: d.item_id.clone(),
            protocol: d.protocol.clone(),
        })
}

/// Bins pass@k decisions by correct-sample count, overall and per modality.
pub fn passk_histogram(decisions: &[ItemDecision]) -> Result<PassKReport, AnalyticsError> {
    let first = decisions.first().ok_or(AnalyticsError::Empty)?;
    let k = pass_k_of(first)?;
    let mut overall = PassKHistogram::new(k);
    let mut by_modality: BTreeMap<Modality, PassKHistogram> = BTreeMap::new();
    for d in decisions {
        let dk = pass_k_of(d)?;
        if dk != k {
            return Err(AnalyticsError::MixedK(k, dk));
        }
        let c = d.n_correct.min(k);
        overall.bins[c] += 1;
        by_modality
            .entry(d.modality)
            .or_insert_with(|| PassKHistogram::new(k))
            .bins[c] += 1;
    }
    Ok(PassKReport { overall, by_modality })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    WithVideo,
    TextOnly,
}

/// One line of an external evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub item_id: String,
    pub model: String,
    #[serde(default)]
    pub frames: Option<u32>,
    pub mode: EvalMode,
    pub correct: bool,
}

pub fn parse_result_log(reader: impl BufRead) -> Result<Vec<ResultRecord>, AnalyticsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AnalyticsError::BadLog {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnalyticsError::BadLog {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Accuracy split for one model and frame count on one benchmark log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    pub model: String,
    pub frames: Option<u32>,
    pub n_items: usize,
    pub n_vg: usize,
    pub with_video_acc: f64,
    pub full_avg: f64,
    /// Accuracy over VG-flagged items only; `None` when no item is VG.
    pub vg_avg: Option<f64>,
    pub text_only_acc: Option<f64>,
    /// `with_video_acc - text_only_acc`.
    pub visual_gain: Option<f64>,
}

fn accuracy<'a>(records: impl Iterator<Item = &'a ResultRecord>) -> (usize, f64) {
    let (mut n, mut c) = (0, 0);
    for r in records {
        n += 1;
        c += usize::from(r.correct);
    }
    (n, pct(c, n))
}

/// Splits a result log into per-(model, frames) full/VG accuracies. Text-only records of
/// the same model are paired with every with-video frame count to give the visual gain.
/// `vg_flags` maps item id to "is visually grounded".
pub fn decompose_scores(
    records: &[ResultRecord],
    vg_flags: &HashMap<String, bool>,
) -> Result<Vec<ScoreDecomposition>, AnalyticsError> {
    if let Some(r) = records.iter().find(|r| !vg_flags.contains_key(&r.item_id)) {
        return Err(AnalyticsError::MissingFlag(r.item_id.clone()));
    }
    let mut groups: BTreeMap<(String, Option<u32>), Vec<&ResultRecord>> = BTreeMap::new();
    let mut text_only: BTreeMap<String, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        match r.mode {
            EvalMode::WithVideo => groups.entry((r.model.clone(), r.frames)).or_default().push(r),
            EvalMode::TextOnly => text_only.entry(r.model.clone()).or_default().push(r),
        }
    }
    let mut out = Vec::new();
    for ((model, frames), rs) in groups {
        let (n_items, full_avg) = accuracy(rs.iter().copied());
        let vg: Vec<&ResultRecord> = rs.iter().copied().filter(|r| vg_flags[&r.item_id]).collect();
        let (n_vg, vg_acc) = accuracy(vg.iter().copied());
        let text = match text_only.get(&model) {
            Some(t) => {
                let a: HashSet<&str> = rs.iter().map(|r| r.item_id.as_str()).collect();
                let b: HashSet<&str> = t.iter().map(|r| r.item_id.as_str()).collect();
                if a != b {
                    return Err(AnalyticsError::MismatchedLogs { model });
                }
                Some(accuracy(t.iter().copied()).1)
            }
            None => None,
        };
        out.push(ScoreDecomposition {
            model,
            frames,
            n_items,
            n_vg,
            with_video_acc: full_avg,
            full_avg,
            vg_avg: (n_vg > 0).then_some(vg_acc),
            text_only_acc: text,
            visual_gain: text.map(|t| full_avg - t),
        });
    }
    Ok(out)
}

/// Mean of per-benchmark accuracies, as in a multi-benchmark "Avg." column.
pub fn benchmark_average(per_benchmark: &[f64]) -> Option<f64> {
    (!per_benchmark.is_empty()).then(|| per_benchmark.iter().sum::<f64>() / per_benchmark.len() as f64)
}

/// Centered uniform frame sampling: `floor((i + 0.5) * T / N)` for `i in 0..N`.
pub fn frame_indices(total_frames: usize, n: usize) -> Vec<usize> {
    if total_frames == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|i| (((2 * i + 1) * total_frames) / (2 * n)).min(total_frames - 1))
        .collect()
}

/// A rendered report table: aligned text and CSV from the same rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = format!("{}\n{}\n", self.title, line(&self.headers));
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// `"48.2"`.
pub fn fmt1(x: f64) -> String {
    format!("{:.1}", round1(x))
}

/// `"+23.2"` / `"-4.0"`.
pub fn fmt_delta(x: f64) -> String {
    let r = round1(x);
    if r >= 0.0 {
        format!("+{r:.1}")
    } else {
        format!("{r:.1}")
    }
}
