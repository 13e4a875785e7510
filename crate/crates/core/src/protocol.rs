//! The structured-output protocol: canonical code serialization for
//! generative targets, and parsing of model generations back into code sets.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_code, CodePattern, CodeVocabulary, ConditionCode};

/// Generations longer than this many characters are truncated.
pub const DEFAULT_MAX_GENERATION_CHARS: usize = 4096;

const INPUT_PLACEHOLDER: &str = "{input}";

/// Sorted ascending, newline separated, no trailing newline.
pub fn serialize_codes<'a>(codes: impl IntoIterator<Item = &'a ConditionCode>) -> String {
    let sorted: BTreeSet<&ConditionCode> = codes.into_iter().collect();
    sorted
        .into_iter()
        .map(ConditionCode::as_str)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flag {
    FormatDeviation,
    OovCode,
    EmptyGeneration,
    DuplicateCode,
    /// The request never produced a generation. Set by the evaluation client.
    Transport,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::FormatDeviation => "FORMAT_DEVIATION",
            Flag::OovCode => "OOV_CODE",
            Flag::EmptyGeneration => "EMPTY_GENERATION",
            Flag::DuplicateCode => "DUPLICATE_CODE",
            Flag::Transport => "TRANSPORT",
        }
    }
}

/// Codes recovered from one generation. `codes` only ever holds in-vocabulary
/// codes; anything code-shaped but unknown lands in `oov_codes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub codes: BTreeSet<ConditionCode>,
    pub raw_text: String,
    pub flags: BTreeSet<Flag>,
    pub oov_codes: Vec<String>,
    /// Non-empty lines that did not look like a code.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deviant_lines: Vec<String>,
}

impl ParsedPrediction {
    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }

    /// The prediction recorded for a request that failed in transport.
    pub fn transport_failure() -> Self {
        ParsedPrediction {
            codes: BTreeSet::new(),
            raw_text: String::new(),
            flags: [Flag::EmptyGeneration, Flag::Transport].into_iter().collect(),
            oov_codes: Vec::new(),
            deviant_lines: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub pattern: CodePattern,
    pub max_chars: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            pattern: CodePattern::default(),
            max_chars: DEFAULT_MAX_GENERATION_CHARS,
        }
    }
}

pub fn parse_generation(text: &str, vocab: &CodeVocabulary) -> ParsedPrediction {
    parse_generation_with(text, vocab, &ParseOptions::default())
}

/// Total over arbitrary input. Lines are trimmed and normalized; blank lines
/// are ignored. Unsorted lists of valid codes parse without flags.
pub fn parse_generation_with(text: &str, vocab: &CodeVocabulary, options: &ParseOptions) -> ParsedPrediction {
    let mut prediction = ParsedPrediction {
        codes: BTreeSet::new(),
        raw_text: text.to_string(),
        flags: BTreeSet::new(),
        oov_codes: Vec::new(),
        deviant_lines: Vec::new(),
    };

    if text.trim().is_empty() {
        prediction.flags.insert(Flag::EmptyGeneration);
        return prediction;
    }

    let body: &str = match text.char_indices().nth(options.max_chars) {
        Some((cut, _)) => {
            prediction.flags.insert(Flag::FormatDeviation);
            &text[..cut]
        }
        None => text,
    };

    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match ConditionCode::parse_with(line, &options.pattern) {
            Ok(code) if vocab.contains(&code) => {
                if !prediction.codes.insert(code) {
                    prediction.flags.insert(Flag::DuplicateCode);
                }
            }
            Ok(code) => {
                prediction.flags.insert(Flag::OovCode);
                if !prediction.oov_codes.iter().any(|c| c == code.as_str()) {
                    prediction.oov_codes.push(code.as_str().to_string());
                }
            }
            Err(_) => {
                debug_assert!(!options.pattern.is_match(&normalize_code(line)));
                prediction.flags.insert(Flag::FormatDeviation);
                prediction.deviant_lines.push(line.to_string());
            }
        }
    }
    prediction
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("user pattern {0:?} has no {{input}} placeholder")]
    MissingPlaceholder(String),
    #[error("cannot read template {path}: {message}")]
    Load { path: String, message: String },
}

/// How a report text becomes a chat request. The default has no system
/// message and passes the text through verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default = "default_user_pattern")]
    pub user_pattern: String,
}

fn default_user_pattern() -> String {
    INPUT_PLACEHOLDER.to_string()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: None,
            user_pattern: default_user_pattern(),
        }
    }
}

impl PromptTemplate {
    /// Loads a template from TOML, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        let load_err = |message: String| TemplateError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let template: PromptTemplate = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| load_err(e.to_string()))?
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.user_pattern.contains(INPUT_PLACEHOLDER) {
            Ok(())
        } else {
            Err(TemplateError::MissingPlaceholder(self.user_pattern.clone()))
        }
    }

    pub fn user_content(&self, input_text: &str) -> String {
        self.user_pattern.replace(INPUT_PLACEHOLDER, input_text)
    }
}

pub fn build_messages(input_text: &str, template: &PromptTemplate) -> Result<Vec<ChatMessage>, TemplateError> {
    template.validate()?;
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = &template.system {
        messages.push(ChatMessage {
            role: Role::System,
            content: system.clone(),
        });
    }
    messages.push(ChatMessage {
        role: Role::User,
        content: template.user_content(input_text),
    });
    Ok(messages)
}
