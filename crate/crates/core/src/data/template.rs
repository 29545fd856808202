//! Instruction prompt templates.
//!
//! A template is plain text with the slot markers `{instruction}`, `{input}`
//! and `{response}`. `{response}` must occur exactly once; everything before
//! it is the inference prompt, and a training render fills it with the
//! record's output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::record::InstructionRecord;
use crate::error::{Error, Result};

pub const HEADER_WITH_INPUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";
pub const HEADER_NO_INPUT: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.";
pub const HEADER_V03_WITH_INPUT: &str = "Below is a combination of instructions explaining the task and contextual inputs. Write a response that adequately meets the request.";
pub const HEADER_V03_NO_INPUT: &str =
    "Below is an instruction explaining the task. Write a response that adequately meets the request.";

const SLOT_INSTRUCTION: &str = "{instruction}";
const SLOT_INPUT: &str = "{input}";
const SLOT_RESPONSE: &str = "{response}";

/// Prompt layout generation. `v0.2` is the single-block instruction format;
/// `v0.3` uses the combined-instructions header with `### Instructions:`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVersion {
    #[serde(rename = "v0.2")]
    V02,
    #[serde(rename = "v0.3")]
    V03,
}

impl fmt::Display for PromptVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVersion::V02 => "v0.2",
            PromptVersion::V03 => "v0.3",
        })
    }
}

impl FromStr for PromptVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v0.2" | "0.2" => Ok(PromptVersion::V02),
            "v0.3" | "0.3" => Ok(PromptVersion::V03),
            _ => Err(Error::Validation(format!(
                "unknown prompt version {s:?} (expected v0.2 or v0.3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    WithInput,
    NoInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    version: PromptVersion,
    text: String,
}

impl PromptTemplate {
    pub fn builtin(kind: TemplateKind, version: PromptVersion) -> Self {
        let (header, section) = match version {
            PromptVersion::V02 => (
                match kind {
                    TemplateKind::WithInput => HEADER_WITH_INPUT,
                    TemplateKind::NoInput => HEADER_NO_INPUT,
                },
                "### Instruction:",
            ),
            PromptVersion::V03 => (
                match kind {
                    TemplateKind::WithInput => HEADER_V03_WITH_INPUT,
                    TemplateKind::NoInput => HEADER_V03_NO_INPUT,
                },
                "### Instructions:",
            ),
        };
        let input_block = match kind {
            TemplateKind::WithInput => "### Input:\n{input}\n\n",
            TemplateKind::NoInput => "",
        };
        let text = format!(
            "{header}\n\n{section}\n{{instruction}}\n\n{input_block}### Response:\n{{response}}"
        );
        Self {
            kind,
            version,
            text,
        }
    }

    /// Parses a user-supplied template. The kind is inferred from whether
    /// the text contains an `{input}` slot.
    pub fn parse(text: &str, version: PromptVersion) -> Result<Self> {
        if !text.contains(SLOT_INSTRUCTION) {
            return Err(Error::Validation(
                "template has no {instruction} slot".into(),
            ));
        }
        if text.matches(SLOT_RESPONSE).count() != 1 {
            return Err(Error::Validation(
                "template must contain exactly one {response} slot".into(),
            ));
        }
        let kind = if text.contains(SLOT_INPUT) {
            TemplateKind::WithInput
        } else {
            TemplateKind::NoInput
        };
        Ok(Self {
            kind,
            version,
            text: text.to_string(),
        })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn version(&self) -> PromptVersion {
        self.version
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Training render: the prompt followed by the record's output.
    pub fn render(&self, record: &InstructionRecord) -> Result<String> {
        self.fill(record, Some(&record.output))
    }

    /// Inference render: stops right where the response would begin.
    pub fn render_inference(&self, record: &InstructionRecord) -> Result<String> {
        self.fill(record, None)
    }

    fn fill(&self, record: &InstructionRecord, response: Option<&str>) -> Result<String> {
        let input = match (self.kind, record.input.as_deref()) {
            (TemplateKind::WithInput, None) => {
                return Err(Error::Contract(
                    "with-input template applied to a record without input".into(),
                ))
            }
            (_, input) => input.unwrap_or(""),
        };
        // Single left-to-right pass so slot markers inside values are kept verbatim.
        let mut out = String::with_capacity(
            self.text.len() + record.instruction.len() + input.len() + record.output.len(),
        );
        let mut rest = self.text.as_str();
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if let Some(after) = tail.strip_prefix(SLOT_INSTRUCTION) {
                out.push_str(&record.instruction);
                rest = after;
            } else if let Some(after) = tail.strip_prefix(SLOT_INPUT) {
                out.push_str(input);
                rest = after;
            } else if let Some(after) = tail.strip_prefix(SLOT_RESPONSE) {
                match response {
                    Some(r) => {
                        out.push_str(r);
                        rest = after;
                    }
                    None => return Ok(out),
                }
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The with-input / no-input template pair for one version; picks the
/// template matching each record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFormat {
    pub with_input: PromptTemplate,
    pub no_input: PromptTemplate,
}

impl PromptFormat {
    pub fn builtin(version: PromptVersion) -> Self {
        Self {
            with_input: PromptTemplate::builtin(TemplateKind::WithInput, version),
            no_input: PromptTemplate::builtin(TemplateKind::NoInput, version),
        }
    }

    pub fn template_for(&self, record: &InstructionRecord) -> &PromptTemplate {
        if record.input.is_some() {
            &self.with_input
        } else {
            &self.no_input
        }
    }

    pub fn render(&self, record: &InstructionRecord) -> Result<String> {
        self.template_for(record).render(record)
    }

    pub fn render_inference(&self, record: &InstructionRecord) -> Result<String> {
        self.template_for(record).render_inference(record)
    }
}

impl Default for PromptFormat {
    fn default() -> Self {
        Self::builtin(PromptVersion::V02)
    }
}

/// Renders `record` through `template` including the response.
pub fn render_prompt(record: &InstructionRecord, template: &PromptTemplate) -> Result<String> {
    template.render(record)
}
