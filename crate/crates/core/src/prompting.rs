//! Text-only prompt rendering and option rotation for circular evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnswerKey, QAItem, MAX_OPTIONS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("item has {0} options; at most 26 can be lettered")]
    TooManyOptions(usize),
    #[error("item \"{0}\" is open-ended and cannot be permuted")]
    OpenEnded(String),
    #[error("template is missing the {{question}} slot")]
    MissingQuestionSlot,
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
}

/// Letter label for a 0-based option index (`0 -> 'A'`).
pub fn option_letter(index: usize) -> Option<char> {
    (index < MAX_OPTIONS).then(|| (b'A' + index as u8) as char)
}

/// 0-based index of an option letter, case-insensitive.
pub fn letter_index(letter: char) -> Option<usize> {
    let up = letter.to_ascii_uppercase();
    up.is_ascii_uppercase().then(|| (up as u8 - b'A') as usize)
}

/// Gold answer as presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresentedGold<'a> {
    Option(usize),
    Text(&'a str),
}

/// Anything that can be shown to a model: a base item or one of its rotations.
pub trait Presented {
    fn item_id(&self) -> &str;
    fn question(&self) -> &str;
    fn options(&self) -> &[String];
    fn gold(&self) -> PresentedGold<'_>;

    fn is_mcq(&self) -> bool {
        !self.options().is_empty()
    }

    /// Letter of the gold option, for MCQ items.
    fn gold_letter(&self) -> Option<char> {
        match self.gold() {
            PresentedGold::Option(i) => option_letter(i),
            PresentedGold::Text(_) => None,
        }
    }
}

impl Presented for QAItem {
    fn item_id(&self) -> &str {
        &self.id
    }

    fn question(&self) -> &str {
        &self.question
    }

    fn options(&self) -> &[String] {
        &self.options
    }

    fn gold(&self) -> PresentedGold<'_> {
        match &self.gold {
            AnswerKey::OptionIndex(i) => PresentedGold::Option(*i),
            AnswerKey::FreeText(t) => PresentedGold::Text(t),
        }
    }
}

/// One circular-evaluation trial: the base options rotated left by `permutation_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutedItem {
    pub base_id: String,
    pub permutation_index: usize,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
}

impl Presented for PermutedItem {
    fn item_id(&self) -> &str {
        &self.base_id
    }

    fn question(&self) -> &str {
        &self.question
    }

    fn options(&self) -> &[String] {
        &self.options
    }

    fn gold(&self) -> PresentedGold<'_> {
        PresentedGold::Option(self.gold_index)
    }
}

/// Rotates the options of an MCQ item left by `k mod |options|`.
pub fn permute_options(item: &QAItem, k: usize) -> Result<PermutedItem, PromptError> {
    let n = item.options.len();
    let AnswerKey::OptionIndex(gold) = item.gold else {
        return Err(PromptError::OpenEnded(item.id.clone()));
    };
    if n == 0 {
        return Err(PromptError::OpenEnded(item.id.clone()));
    }
    let shift = k % n;
    let mut options = item.options.clone();
    options.rotate_left(shift);
    Ok(PermutedItem {
        base_id: item.id.clone(),
        permutation_index: k,
        question: item.question.clone(),
        options,
        gold_index: (gold + n - shift) % n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateName {
    Default,
    Enhanced,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Default => "default",
            TemplateName::Enhanced => "enhanced",
        }
    }
}

impl std::str::FromStr for TemplateName {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(TemplateName::Default),
            "enhanced" => Ok(TemplateName::Enhanced),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }
}

impl std::fmt::Display for TemplateName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const MCQ_ANSWER_INSTRUCTION: &str =
    "Finish with a final line of the form \"Answer: X\", where X is the letter of your chosen option.";
pub const OPEN_ANSWER_INSTRUCTION: &str =
    "Finish with a final line of the form \"Answer: <your answer>\", giving a short answer.";

/// Sentence the enhanced template adds to suppress "I need the video" refusals.
pub const NO_REFUSAL_CLAUSE: &str = "You will not be shown the video or image. You must still answer: \
choose exactly one option (or give your single best answer), and do not refuse or state that you \
need the video.";

const DEFAULT_BODY: &str = "{question}\n{formatted_options}\n{answer_format_instruction}";

/// A prompt body with `{question}`, `{formatted_options}` and
/// `{answer_format_instruction}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::Default => DEFAULT_BODY.to_string(),
            TemplateName::Enhanced => {
                format!("{{question}}\n{{formatted_options}}\n{NO_REFUSAL_CLAUSE}\n{{answer_format_instruction}}")
            }
        };
        Self { name, body }
    }

    /// Replaces the body of the named template. The `{question}` slot is required.
    pub fn with_body(name: TemplateName, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        if !body.contains("{question}") {
            return Err(PromptError::MissingQuestionSlot);
        }
        Ok(Self { name, body })
    }

    pub fn from_file(name: TemplateName, path: &Path) -> std::io::Result<Result<Self, PromptError>> {
        let body = std::fs::read_to_string(path)?;
        Ok(Self::with_body(name, body.trim_end().to_string()))
    }
}

/// Lettered option block, one `"X. text"` line per option.
pub fn format_options(options: &[String]) -> Result<String, PromptError> {
    if options.len() > MAX_OPTIONS {
        return Err(PromptError::TooManyOptions(options.len()));
    }
    let lines: Vec<String> = options
        .iter()
        .enumerate()
        .map(|(i, opt)| format!("{}. {}", option_letter(i).unwrap(), opt))
        .collect();
    Ok(lines.join("\n"))
}

/// Renders the text-only prompt for an item. The media reference never appears.
pub fn render_prompt(item: &impl Presented, template: &PromptTemplate) -> Result<String, PromptError> {
    let (options_block, instruction) = if item.is_mcq() {
        (format_options(item.options())?, MCQ_ANSWER_INSTRUCTION)
    } else {
        (String::new(), OPEN_ANSWER_INSTRUCTION)
    };
    // Single pass over the body so slot-like text inside questions or options is not re-expanded.
    let mut out = String::with_capacity(template.body.len() + item.question().len() + options_block.len() + 128);
    let mut rest = template.body.as_str();
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with("{question}") {
            (item.question(), "{question}".len())
        } else if tail.starts_with("{formatted_options}") {
            let mut len = "{formatted_options}".len();
            // An empty option block takes its line with it.
            if options_block.is_empty() && tail[len..].starts_with('\n') {
                len += 1;
            }
            (options_block.as_str(), len)
        } else if tail.starts_with("{answer_format_instruction}") {
            (instruction, "{answer_format_instruction}".len())
        } else {
            ("{", 1)
        };
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    Ok(out)
}
