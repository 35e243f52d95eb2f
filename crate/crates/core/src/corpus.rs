//! QA item data model and JSONL dataset loading / subset emission.
//!
//! One record per line:
//!
//! ```text
//! {"id": str, "question": str, "options": [str]?, "answer": str|int,
//!  "modality": "video"|"image", "media_ref": str, "source": str, "meta": {str: str}?}
//! ```
//!
//! `answer` is a 0-based option index when `options` is non-empty and a free-text
//! string otherwise. `media_ref` is carried through untouched and never opened.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Options are addressed by letters A-Z.
pub const MAX_OPTIONS: usize = 26;
pub const MIN_OPTIONS: usize = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    InvalidField {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate id \"{id}\"")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: gold index {index} out of range for {n_options} options")]
    GoldOutOfRange {
        line: usize,
        index: usize,
        n_options: usize,
    },
    #[error("unknown id \"{0}\" in keep set")]
    UnknownId(String),
    #[error("unsupported dataset format `{0}`")]
    UnsupportedFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Image,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Video => "video",
            Modality::Image => "image",
        })
    }
}

/// Ground-truth answer of an item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerKey {
    OptionIndex(usize),
    FreeText(String),
}

impl AnswerKey {
    pub fn index(&self) -> Option<usize> {
        match self {
            AnswerKey::OptionIndex(i) => Some(*i),
            AnswerKey::FreeText(_) => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            AnswerKey::OptionIndex(_) => None,
            AnswerKey::FreeText(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    /// Empty for open-ended items.
    pub options: Vec<String>,
    pub gold: AnswerKey,
    pub modality: Modality,
    pub media_ref: String,
    pub source: String,
    pub meta: BTreeMap<String, String>,
}

impl QAItem {
    pub fn is_mcq(&self) -> bool {
        !self.options.is_empty()
    }

    /// Checks the per-item invariants. Errors carry `line` for reporting.
    pub fn validate(&self, line: usize) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::InvalidField {
                line,
                field: "id",
                message: "must be non-empty".into(),
            });
        }
        match (&self.gold, self.options.len()) {
            (AnswerKey::FreeText(text), 0) => {
                if text.trim().is_empty() {
                    return Err(CorpusError::InvalidField {
                        line,
                        field: "answer",
                        message: "open-ended answer must be non-empty".into(),
                    });
                }
            }
            (AnswerKey::FreeText(_), _) => {
                return Err(CorpusError::InvalidField {
                    line,
                    field: "answer",
                    message: "must be an integer option index when options are present".into(),
                });
            }
            (AnswerKey::OptionIndex(_), 0) => {
                return Err(CorpusError::InvalidField {
                    line,
                    field: "answer",
                    message: "must be a string when options are absent".into(),
                });
            }
            (AnswerKey::OptionIndex(index), n) => {
                if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
                    return Err(CorpusError::InvalidField {
                        line,
                        field: "options",
                        message: format!("expected {MIN_OPTIONS}-{MAX_OPTIONS} options, got {n}"),
                    });
                }
                if *index >= n {
                    return Err(CorpusError::GoldOutOfRange {
                        line,
                        index: *index,
                        n_options: n,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub mcq: usize,
    pub open_ended: usize,
    pub video: usize,
    pub image: usize,
}

impl Counts {
    pub fn of<'a>(items: impl IntoIterator<Item = &'a QAItem>) -> Self {
        let mut c = Counts::default();
        for item in items {
            c.total += 1;
            if item.is_mcq() {
                c.mcq += 1;
            } else {
                c.open_ended += 1;
            }
            match item.modality {
                Modality::Video => c.video += 1,
                Modality::Image => c.image += 1,
            }
        }
        c
    }
}

/// An immutable, validated list of items.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    items: Vec<QAItem>,
    counts: Counts,
}

impl Dataset {
    /// Builds a dataset from already constructed items, enforcing all invariants.
    /// Item position (1-based) stands in for the line number in errors.
    pub fn new(name: impl Into<String>, items: Vec<QAItem>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            item.validate(i + 1)?;
            if !seen.insert(item.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: item.id.clone(),
                });
            }
        }
        let counts = Counts::of(&items);
        Ok(Self {
            name: name.into(),
            items,
            counts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn items(&self) -> &[QAItem] {
        &self.items
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&QAItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// On-disk shape of one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    answer: RecordAnswer,
    modality: Modality,
    media_ref: String,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RecordAnswer {
    Index(u64),
    Text(String),
}

impl Record {
    fn into_item(self) -> QAItem {
        let options = self.options.unwrap_or_default();
        let gold = match self.answer {
            RecordAnswer::Index(i) => AnswerKey::OptionIndex(usize::try_from(i).unwrap_or(usize::MAX)),
            RecordAnswer::Text(t) => AnswerKey::FreeText(t),
        };
        QAItem {
            id: self.id,
            question: self.question,
            options,
            gold,
            modality: self.modality,
            media_ref: self.media_ref,
            source: self.source,
            meta: self.meta.unwrap_or_default(),
        }
    }

    fn from_item(item: &QAItem) -> Self {
        Record {
            id: item.id.clone(),
            question: item.question.clone(),
            options: item.is_mcq().then(|| item.options.clone()),
            answer: match &item.gold {
                AnswerKey::OptionIndex(i) => RecordAnswer::Index(*i as u64),
                AnswerKey::FreeText(t) => RecordAnswer::Text(t.clone()),
            },
            modality: item.modality,
            media_ref: item.media_ref.clone(),
            source: item.source.clone(),
            meta: (!item.meta.is_empty()).then(|| item.meta.clone()),
        }
    }
}

/// Serializes one item as a single JSONL line (no trailing newline).
pub fn item_to_json_line(item: &QAItem) -> String {
    serde_json::to_string(&Record::from_item(item)).expect("record serialization is infallible")
}

/// Parses a JSONL dataset from any reader. Blank lines are skipped.
pub fn parse_dataset(name: &str, reader: impl BufRead) -> Result<Dataset, CorpusError> {
    let mut items = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        let item = record.into_item();
        item.validate(lineno)?;
        if !seen.insert(item.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: lineno,
                id: item.id,
            });
        }
        items.push(item);
    }
    let counts = Counts::of(&items);
    Ok(Dataset {
        name: name.to_string(),
        items,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(CorpusError::UnsupportedFormat(other.to_string())),
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let DatasetFormat::Jsonl = format;
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&name, BufReader::new(file))
}

/// Result of emitting a subset file.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub path: PathBuf,
    pub total: usize,
    pub kept: usize,
    /// `kept / total`, rounded to 3 decimals. 1.0 for an empty source dataset.
    pub retention: f64,
}

/// `kept / total` rounded to 3 decimals.
pub fn retention_ratio(kept: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    (kept as f64 / total as f64 * 1000.0).round() / 1000.0
}

/// Writes the items of `dataset` whose id is in `keep` to `out`, preserving order.
pub fn write_subset(dataset: &Dataset, keep: &BTreeSet<String>, out: &Path) -> Result<SubsetReport, CorpusError> {
    let known: HashSet<&str> = dataset.ids().collect();
    if let Some(unknown) = keep.iter().find(|id| !known.contains(id.as_str())) {
        return Err(CorpusError::UnknownId(unknown.clone()));
    }
    let io_err = |source| CorpusError::Io {
        path: out.to_path_buf(),
        source,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(out).map_err(io_err)?);
    let mut kept = 0;
    for item in dataset.items().iter().filter(|i| keep.contains(&i.id)) {
        writeln!(w, "{}", item_to_json_line(item)).map_err(io_err)?;
        kept += 1;
    }
    w.flush().map_err(io_err)?;
    Ok(SubsetReport {
        path: out.to_path_buf(),
        total: dataset.len(),
        kept,
        retention: retention_ratio(kept, dataset.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset, CorpusError> {
        parse_dataset("t", s.as_bytes())
    }

    const THREE: &str = r#"{"id":"q1","question":"Which?","options":["a","b","c","d"],"answer":1,"modality":"video","media_ref":"v/1.mp4","source":"test"}
{"id":"q2","question":"Who?","options":["x","y"],"answer":0,"modality":"image","media_ref":"i/2.png","source":"test","meta":{"split":"train"}}
{"id":"q3","question":"How many?","answer":"42","modality":"video","media_ref":"v/3.mp4","source":"test"}
"#;

    #[test]
    fn counts_mixed_file() {
        let ds = parse(THREE).unwrap();
        let c = ds.counts();
        assert_eq!((c.total, c.mcq, c.open_ended), (3, 2, 1));
        assert_eq!((c.video, c.image), (2, 1));
        assert_eq!(ds.items()[1].meta["split"], "train");
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let s = r#"{"id":"q7","question":"a","answer":"x","modality":"video","media_ref":"","source":"s"}
{"id":"q7","question":"b","answer":"y","modality":"video","media_ref":"","source":"s"}"#;
        let err = parse(s).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, ref id } if id == "q7"));
        assert!(err.to_string().contains("q7"));
    }

    #[test]
    fn gold_index_out_of_range() {
        let s = r#"{"id":"q1","question":"a","options":["A?","B?"],"answer":2,"modality":"video","media_ref":"","source":"s"}"#;
        assert!(matches!(
            parse(s).unwrap_err(),
            CorpusError::GoldOutOfRange {
                line: 1,
                index: 2,
                n_options: 2
            }
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let s = format!("{}\n{{not json\n", THREE.lines().next().unwrap());
        let err = parse(&s).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_field_is_malformed() {
        let s = r#"{"id":"q1","options":["a","b"],"answer":0,"modality":"video","media_ref":"","source":"s"}"#;
        let err = parse(s).unwrap_err();
        assert!(err.to_string().contains("question"), "{err}");
    }

    #[test]
    fn answer_kind_must_match_options() {
        let text_with_options = r#"{"id":"q1","question":"a","options":["a","b"],"answer":"a","modality":"video","media_ref":"","source":"s"}"#;
        assert!(matches!(
            parse(text_with_options).unwrap_err(),
            CorpusError::InvalidField { field: "answer", .. }
        ));
        let index_without_options =
            r#"{"id":"q1","question":"a","answer":0,"modality":"video","media_ref":"","source":"s"}"#;
        assert!(matches!(
            parse(index_without_options).unwrap_err(),
            CorpusError::InvalidField { field: "answer", .. }
        ));
        let empty_text = r#"{"id":"q1","question":"a","answer":"  ","modality":"video","media_ref":"","source":"s"}"#;
        assert!(parse(empty_text).is_err());
    }

    #[test]
    fn option_count_bounds() {
        let one =
            r#"{"id":"q1","question":"a","options":["a"],"answer":0,"modality":"video","media_ref":"","source":"s"}"#;
        assert!(matches!(
            parse(one).unwrap_err(),
            CorpusError::InvalidField { field: "options", .. }
        ));
        let opts: Vec<String> = (0..27).map(|i| format!("\"o{i}\"")).collect();
        let many = format!(
            r#"{{"id":"q1","question":"a","options":[{}],"answer":0,"modality":"video","media_ref":"","source":"s"}}"#,
            opts.join(",")
        );
        assert!(parse(&many).is_err());
    }

    #[test]
    fn subset_preserves_order_and_reports_retention() {
        let dir = tempfile::tempdir().unwrap();
        let ds = parse(THREE).unwrap();
        let keep: BTreeSet<String> = ["q3", "q1"].iter().map(|s| s.to_string()).collect();
        let out = dir.path().join("sub.jsonl");
        let report = write_subset(&ds, &keep, &out).unwrap();
        assert_eq!(report.kept, 2);
        assert_eq!(report.retention, 0.667);
        let back = load_dataset(&out, DatasetFormat::Jsonl).unwrap();
        let ids: Vec<_> = back.ids().collect();
        assert_eq!(ids, ["q1", "q3"]);
    }

    #[test]
    fn empty_keep_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = parse(THREE).unwrap();
        let out = dir.path().join("empty.jsonl");
        let report = write_subset(&ds, &BTreeSet::new(), &out).unwrap();
        assert_eq!(report.kept, 0);
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
    }

    #[test]
    fn unknown_keep_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = parse(THREE).unwrap();
        let keep: BTreeSet<String> = ["nope".to_string()].into();
        let err = write_subset(&ds, &keep, &dir.path().join("x.jsonl")).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownId(id) if id == "nope"));
    }

    #[test]
    fn published_retention_rounds_to_69_1() {
        assert_eq!(retention_ratio(181_710, 263_071), 0.691);
    }
}
