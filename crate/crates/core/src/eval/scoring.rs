use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fewshot::{
    assemble_fewshot_prompt, choice_continuation, ChoiceTask, FewShotSpec, TaskFormat,
};
use crate::data::{ByteTokenizer, Category, InstructionRecord, PromptFormat, PromptVersion, BOS};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

/// Log-likelihood of a continuation given a prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub log_prob: f64,
    pub tokens: usize,
    /// Prompt tokens were dropped from the left to fit the context.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    /// Summed log-likelihood.
    #[default]
    Raw,
    /// Log-likelihood divided by continuation token count.
    LengthNormalized,
}

impl std::fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoringMode::Raw => "raw",
            ScoringMode::LengthNormalized => "length-normalized",
        })
    }
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ScoringMode::Raw),
            "length-normalized" => Ok(ScoringMode::LengthNormalized),
            _ => Err(Error::Validation(format!(
                "unknown scoring mode {s:?} (expected raw or length-normalized)"
            ))),
        }
    }
}

pub(crate) fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let lse = max
        + row
            .iter()
            .map(|&x| (x as f64 - max).exp())
            .sum::<f64>()
            .ln();
    row[target] as f64 - lse
}

/// Sums `log p(token | prefix)` over the continuation tokens of
/// `[BOS] prompt continuation`. When the sequence exceeds the model
/// context the prompt is cut from the left.
pub fn score_continuation(
    model: &dyn LanguageModel,
    prompt: &str,
    continuation: &str,
) -> Result<Score> {
    let tok = ByteTokenizer;
    let cont = tok.encode(continuation);
    if cont.is_empty() {
        return Err(Error::Contract(
            "continuation encodes to zero tokens".into(),
        ));
    }
    let max = model.max_seq_len();
    if cont.len() + 1 > max {
        return Err(Error::ContextOverflow {
            len: cont.len() + 1,
            max,
        });
    }
    let mut ids = vec![BOS];
    ids.extend_from_slice(&tok.encode(prompt));
    ids.extend_from_slice(&cont);
    let truncated = ids.len() > max;
    if truncated {
        ids.drain(..ids.len() - max);
    }
    let logits = model.logits(&ids)?;
    let start = ids.len() - cont.len();
    let log_prob = (start..ids.len())
        .map(|p| log_softmax_at(logits.row(p - 1), ids[p] as usize))
        .sum();
    Ok(Score {
        log_prob,
        tokens: cont.len(),
        truncated,
    })
}

/// Index of the largest score; the first one wins ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predicted: usize,
    pub scores: Vec<f64>,
    pub truncated: bool,
    /// Token length of the longest `[BOS] prompt choice` sequence before truncation.
    pub max_sequence_len: usize,
}

/// Picks the choice whose continuation is most likely after the few-shot
/// prompt. Ties go to the lowest index.
pub fn classify_by_likelihood(
    model: &dyn LanguageModel,
    task: &ChoiceTask,
    spec: &FewShotSpec,
    format: &TaskFormat,
    version: PromptVersion,
    mode: ScoringMode,
) -> Result<Classification> {
    task.validate()?;
    let prompt = assemble_fewshot_prompt(task, spec, format, version)?;
    let prompt_len = prompt.len() + 1;
    let scored: Vec<Score> = task
        .choices
        .par_iter()
        .map(|c| score_continuation(model, &prompt, &choice_continuation(c, version)))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = scored
        .iter()
        .map(|s| match mode {
            ScoringMode::Raw => s.log_prob,
            ScoringMode::LengthNormalized => s.log_prob / s.tokens as f64,
        })
        .collect();
    let predicted = argmax_lowest(&scores);
    Ok(Classification {
        predicted,
        scores,
        truncated: scored.iter().any(|s| s.truncated),
        max_sequence_len: prompt_len + scored.iter().map(|s| s.tokens).max().unwrap_or(0),
    })
}

fn question_prompt(question: &str, format: &PromptFormat) -> Result<String> {
    let record = InstructionRecord {
        instruction: question.to_string(),
        input: None,
        output: String::from("-"),
        category: Category::Qa,
        source: String::new(),
    };
    format.render_inference(&record)
}

/// Negative log-likelihood summed over response tokens, with the token count.
pub fn response_nll(
    model: &dyn LanguageModel,
    question: &str,
    response: &str,
    format: &PromptFormat,
) -> Result<Score> {
    if response.is_empty() {
        return Err(Error::Contract(
            "perplexity needs a non-empty response".into(),
        ));
    }
    let prompt = question_prompt(question, format)?;
    let s = score_continuation(model, &prompt, response)?;
    Ok(Score {
        log_prob: -s.log_prob,
        ..s
    })
}

/// `exp` of the mean response-token negative log-likelihood; the rendered
/// question only conditions.
pub fn response_perplexity(
    model: &dyn LanguageModel,
    question: &str,
    response: &str,
    format: &PromptFormat,
) -> Result<f64> {
    let s = response_nll(model, question, response, format)?;
    Ok((s.log_prob / s.tokens as f64).exp())
}
