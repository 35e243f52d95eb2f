//! Turning free-form model responses into answers and judging them.
//!
//! Extraction rules, first hit wins:
//!
//! 1. MCQ only: the last `Answer: X` / `answer is X` statement, letter in range.
//! 2. MCQ only: the last line consisting of a lone in-range letter (`(B)`, `**C**`, `d.`).
//! 3. MCQ only: exactly one option's text (leading article dropped) appears in the response.
//! 4. Refusal lexicon match.
//! 5. MCQ: unparsable. Open-ended: the final answer line, normalized.

use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::RawResponse;
use crate::prompting::{letter_index, option_letter, Presented, PresentedGold};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractedAnswer {
    OptionLetter { letter: char },
    FreeText { text: String },
    Refusal { raw: String },
    Unparsable { raw: String },
}

impl ExtractedAnswer {
    pub fn is_refusal(&self) -> bool {
        matches!(self, ExtractedAnswer::Refusal { .. })
    }

    pub fn is_answer(&self) -> bool {
        matches!(
            self,
            ExtractedAnswer::OptionLetter { .. } | ExtractedAnswer::FreeText { .. }
        )
    }
}

pub const DEFAULT_REFUSAL_TERMS: &[&str] = &[
    "cannot answer",
    "can't answer",
    "unable to answer",
    "need the video",
    "need to see the video",
    "need to watch the video",
    "unable to determine without",
    "cannot determine without",
    "can't determine without",
    "without access to the video",
];

/// Case-insensitive phrases marking a response as a refusal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalLexicon {
    terms: Vec<String>,
}

impl Default for RefusalLexicon {
    fn default() -> Self {
        Self {
            terms: DEFAULT_REFUSAL_TERMS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

impl RefusalLexicon {
    pub fn with_terms<I, S>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for term in extra {
            let t = fold(term.as_ref());
            if !t.is_empty() && !self.terms.contains(&t) {
                self.terms.push(t);
            }
        }
        self
    }

    /// Adds one phrase per non-empty line of `path`; `#` starts a comment line.
    pub fn extend_from_file(self, path: &Path) -> std::io::Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let extra: Vec<&str> = body
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Ok(self.with_terms(extra))
    }

    pub fn matches(&self, text: &str) -> bool {
        let folded = fold(text);
        self.terms.iter().any(|t| folded.contains(t.as_str()))
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Lowercases, unifies apostrophes and collapses whitespace.
fn fold(text: &str) -> String {
    let lowered = text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

const MARKUP: &[char] = &['*', '_', '`', '"', '\'', '(', ')', '[', ']', '{', '}', '<', '>'];

/// Normalization used for free-text answers: lowercase, trimmed, whitespace
/// collapsed, wrapping markup and terminal punctuation removed.
pub fn normalize_answer(text: &str) -> String {
    let folded = fold(text);
    let mut s = folded.as_str();
    loop {
        let next = s
            .trim()
            .trim_matches(MARKUP)
            .trim_end_matches(['.', ',', '!', '?', ';', ':'])
            .trim();
        if next == s {
            break;
        }
        s = next;
    }
    s.to_string()
}

static ANSWER_STATEMENT: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r#"(?i)\banswer[*_]*\s*(?:is\b[*_]*\s*:?|:|-)[*_]*\s*(?:(?:option|choice)\s+)?(?P<open>[*_(\[{"'`\s]*)(?P<letter>[a-z])\b"#,
    )
    .unwrap()
});

static LONE_LETTER: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"^[*_(\[{"'`\s]*(?P<letter>[A-Za-z])[*_)\]}"'`]*\s*[.):]?\s*$"#).unwrap());

static FINAL_ANSWER_PREFIX: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?i)^[*_\s]*(?:final\s+)?answer[*_]*\s*(?:is\b\s*:?|:)\s*").unwrap());

fn in_range(letter: char, n_options: usize) -> Option<char> {
    letter_index(letter).filter(|&i| i < n_options).and_then(option_letter)
}

fn answer_statement(text: &str, n_options: usize) -> Option<char> {
    let last = ANSWER_STATEMENT.captures_iter(text).last()?;
    let letter_m = last.name("letter").unwrap();
    let letter = letter_m.as_str().chars().next()?;
    let wrapped = last.name("open").is_some_and(|m| !m.as_str().trim().is_empty());
    if letter.is_ascii_lowercase() && !wrapped {
        // "the answer is a rope": a lowercase letter running into a word is prose.
        let after = &text[letter_m.end()..];
        let mut chars = after.chars();
        if matches!(chars.next(), Some(c) if c.is_whitespace()) && chars.next().is_some_and(|c| c.is_alphabetic()) {
            return None;
        }
    }
    in_range(letter, n_options)
}

fn lone_letter_line(text: &str, n_options: usize) -> Option<char> {
    text.lines()
        .rev()
        .filter_map(|line| LONE_LETTER.captures(line))
        .find_map(|c| in_range(c["letter"].chars().next()?, n_options))
}

/// Option text with a leading article removed, for containment matching.
fn option_core(option: &str) -> String {
    let n = normalize_answer(option);
    for article in ["a ", "an ", "the "] {
        if let Some(rest) = n.strip_prefix(article) {
            if !rest.is_empty() {
                return rest.to_string();
            }
        }
    }
    n
}

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(start, _)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

fn unique_option_mention(text: &str, options: &[String]) -> Option<char> {
    let hay = fold(text);
    let mut hits = options
        .iter()
        .enumerate()
        .filter(|(_, opt)| contains_phrase(&hay, &option_core(opt)));
    let (first, _) = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    option_letter(first)
}

/// The free-text answer of an open-ended response: the last `Answer:` line, or the last non-empty line.
fn final_free_text(text: &str) -> Option<String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let from_answer_line = text.lines().rev().find_map(|line| {
        FINAL_ANSWER_PREFIX
            .find(line)
            .map(|m| line[m.end()..].to_string())
            .filter(|rest| !normalize_answer(rest).is_empty())
    });
    let line = from_answer_line.or_else(|| lines.next_back().map(str::to_string))?;
    let normalized = normalize_answer(&line);
    (!normalized.is_empty()).then_some(normalized)
}

/// Parses a response against the item it answers. Never fails.
pub fn extract(response: &str, item: &impl Presented, lexicon: &RefusalLexicon) -> ExtractedAnswer {
    let n = item.options().len();
    if item.is_mcq() {
        let letter = answer_statement(response, n)
            .or_else(|| lone_letter_line(response, n))
            .or_else(|| unique_option_mention(response, item.options()));
        if let Some(letter) = letter {
            return ExtractedAnswer::OptionLetter { letter };
        }
    }
    if lexicon.matches(response) {
        return ExtractedAnswer::Refusal {
            raw: response.to_string(),
        };
    }
    if !item.is_mcq() {
        if let Some(text) = final_free_text(response) {
            return ExtractedAnswer::FreeText { text };
        }
    }
    ExtractedAnswer::Unparsable {
        raw: response.to_string(),
    }
}

fn parse_number(text: &str) -> Option<f64> {
    let t = text.trim();
    let cleaned: String = if t.contains(',') && t.split(',').skip(1).all(|g| g.len() == 3) {
        t.replace(',', "")
    } else {
        t.to_string()
    };
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn numbers_equal(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-6 * a.abs().max(b.abs())
}

/// Whether an extracted answer matches the (possibly permuted) gold answer.
pub fn judge(extracted: &ExtractedAnswer, item: &impl Presented) -> bool {
    match (extracted, item.gold()) {
        (ExtractedAnswer::OptionLetter { letter }, PresentedGold::Option(gold)) => letter_index(*letter) == Some(gold),
        (ExtractedAnswer::FreeText { text }, PresentedGold::Text(gold)) => {
            let got = normalize_answer(text);
            let want = normalize_answer(gold);
            if got == want {
                return true;
            }
            match (parse_number(&got), parse_number(&want)) {
                (Some(a), Some(b)) => numbers_equal(a, b),
                _ => false,
            }
        }
        _ => false,
    }
}

/// How a trial was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolTrial {
    /// Protocol label, e.g. `single`, `circular:3`, `pass@10`.
    pub protocol: String,
    /// Permutation index (circular) or sample index (pass@k); 0 for single-pass.
    pub index: usize,
    pub template: crate::prompting::TemplateName,
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub backend_id: String,
    pub trial: ProtocolTrial,
    pub raw: RawResponse,
    pub extracted: ExtractedAnswer,
    pub correct: bool,
    pub refused: bool,
}

impl Verdict {
    pub fn evaluate(
        item: &impl Presented,
        backend_id: &str,
        trial: ProtocolTrial,
        raw: RawResponse,
        lexicon: &RefusalLexicon,
    ) -> Self {
        let extracted = extract(&raw.text, item, lexicon);
        let correct = judge(&extracted, item);
        let refused = extracted.is_refusal();
        Self {
            item_id: item.item_id().to_string(),
            backend_id: backend_id.to_string(),
            trial,
            raw,
            extracted,
            correct,
            refused,
        }
    }
}
