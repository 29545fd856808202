use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{PromptVersion, HEADER_V03_WITH_INPUT};
use crate::error::{Error, Result};

/// A multiple-choice item: labelled context fields, ordered answer strings
/// and the index of the correct one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceTask {
    pub fields: IndexMap<String, String>,
    pub choices: Vec<String>,
    pub gold: usize,
    pub version: PromptVersion,
}

impl ChoiceTask {
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Validation(
                "choice task has no context fields".into(),
            ));
        }
        if self.choices.len() < 2 {
            return Err(Error::Validation(format!(
                "choice task needs at least 2 choices, got {}",
                self.choices.len()
            )));
        }
        if self.gold >= self.choices.len() {
            return Err(Error::Validation(format!(
                "gold index {} out of range for {} choices",
                self.gold,
                self.choices.len()
            )));
        }
        if self.choices.iter().any(String::is_empty) {
            return Err(Error::Validation("empty choice string".into()));
        }
        Ok(())
    }

    pub fn answer(&self) -> &str {
        &self.choices[self.gold]
    }
}

/// Reads JSON Lines of [`ChoiceTask`], validating each.
pub fn load_choice_tasks(path: &Path) -> Result<Vec<ChoiceTask>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let task: ChoiceTask = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        task.validate().map_err(|e| record(e.to_string()))?;
        out.push(task);
    }
    Ok(out)
}

/// Solved demonstrations shown before the query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSpec {
    pub k: usize,
    pub demonstrations: Vec<ChoiceTask>,
}

impl FewShotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k > self.demonstrations.len() {
            return Err(Error::Contract(format!(
                "{}-shot prompt requested with only {} demonstrations",
                self.k,
                self.demonstrations.len()
            )));
        }
        Ok(())
    }
}

/// Task wording. `description` opens a v0.2 prompt; `instruction` fills
/// every `### Instructions:` block of a v0.3 prompt; `answer_label` ends
/// each v0.2 block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFormat {
    pub description: String,
    pub instruction: String,
    pub answer_label: String,
}

impl Default for TaskFormat {
    fn default() -> Self {
        Self {
            description: "Choose the correct answer.".into(),
            instruction: "Choose the correct answer.".into(),
            answer_label: "Answer".into(),
        }
    }
}

/// The text scored after the prompt for one choice.
pub fn choice_continuation(choice: &str, version: PromptVersion) -> String {
    match version {
        PromptVersion::V02 => format!(" {choice}"),
        PromptVersion::V03 => choice.to_string(),
    }
}

fn labelled_fields(task: &ChoiceTask) -> String {
    task.fields
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn v02_block(task: &ChoiceTask, format: &TaskFormat, answer: Option<&str>) -> String {
    let mut s = labelled_fields(task);
    s.push('\n');
    s.push_str(&format.answer_label);
    s.push(':');
    if let Some(a) = answer {
        s.push(' ');
        s.push_str(a);
        s.push_str("\n\n");
    }
    s
}

fn v03_block(task: &ChoiceTask, format: &TaskFormat, answer: Option<&str>) -> String {
    // A lone field is shown bare; several keep their labels.
    let input = if task.fields.len() == 1 {
        task.fields[0].clone()
    } else {
        labelled_fields(task)
    };
    let mut s = format!(
        "### Instructions:\n{}\n\n### Input:\n{input}\n\n### Response:\n",
        format.instruction
    );
    if let Some(a) = answer {
        s.push_str(a);
        s.push_str("\n\n");
    }
    s
}

/// Builds the prompt up to the point where a choice is appended.
pub fn assemble_fewshot_prompt(
    task: &ChoiceTask,
    spec: &FewShotSpec,
    format: &TaskFormat,
    version: PromptVersion,
) -> Result<String> {
    spec.validate()?;
    let demos = &spec.demonstrations[..spec.k];
    let mut out = String::new();
    match version {
        PromptVersion::V02 => {
            out.push_str(&format.description);
            out.push_str("\n\n");
            for d in demos {
                out.push_str(&v02_block(d, format, Some(d.answer())));
            }
            out.push_str(&v02_block(task, format, None));
        }
        PromptVersion::V03 => {
            out.push_str(HEADER_V03_WITH_INPUT);
            out.push_str("\n\n");
            for d in demos {
                out.push_str(&v03_block(d, format, Some(d.answer())));
            }
            out.push_str(&v03_block(task, format, None));
        }
    }
    Ok(out)
}
