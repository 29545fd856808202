//! Conversion of typo-correction pairs and question/answer pairs into
//! instruction records.

use serde::{Deserialize, Serialize};

use super::record::{Category, InstructionRecord};
use crate::error::{Error, Result};

pub const DEFAULT_TYPO_INSTRUCTION: &str =
    "Correct the typographical errors in the following text.";
pub const DEFAULT_QA_INSTRUCTION: &str = "Answer the following question.";

/// Fixed instruction strings used when converting pair corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionTemplates {
    pub typo_instruction: String,
    pub qa_instruction: String,
    pub typo_source: String,
    pub qa_source: String,
}

impl Default for ConversionTemplates {
    fn default() -> Self {
        Self {
            typo_instruction: DEFAULT_TYPO_INSTRUCTION.into(),
            qa_instruction: DEFAULT_QA_INSTRUCTION.into(),
            typo_source: "typo-pairs".into(),
            qa_source: "qa-pairs".into(),
        }
    }
}

/// One line of a typo-pair file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypoPair {
    pub wrong: String,
    pub corrected: String,
}

/// One line of a question/answer file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

fn non_empty(label: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        Err(Error::Validation(format!("{label} must be non-empty")))
    } else {
        Ok(())
    }
}

impl ConversionTemplates {
    pub fn convert_typo_pair(
        &self,
        wrong_text: &str,
        corrected_text: &str,
    ) -> Result<InstructionRecord> {
        non_empty("wrong text", wrong_text)?;
        non_empty("corrected text", corrected_text)?;
        InstructionRecord::new(
            self.typo_instruction.clone(),
            Some(wrong_text.to_string()),
            corrected_text,
            Category::Correction,
            self.typo_source.clone(),
        )
    }

    pub fn convert_qa_pair(&self, question: &str, answer: &str) -> Result<InstructionRecord> {
        non_empty("question", question)?;
        non_empty("answer", answer)?;
        InstructionRecord::new(
            self.qa_instruction.clone(),
            Some(question.to_string()),
            answer,
            Category::Qa,
            self.qa_source.clone(),
        )
    }
}
