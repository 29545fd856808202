use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fewshot::{ChoiceTask, FewShotSpec, TaskFormat};
use super::scoring::{classify_by_likelihood, response_nll, ScoringMode};
use crate::data::{PromptFormat, PromptVersion};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerplexityItem {
    pub question: String,
    pub response: String,
}

/// Reads JSON Lines of `{question, response}`.
pub fn load_perplexity_items(path: &Path) -> Result<Vec<PerplexityItem>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: PerplexityItem = serde_json::from_str(line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Items whose full sequence is longer than the tuning window or the model
/// context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowCounts {
    pub beyond_tuning_len: usize,
    pub beyond_model_len: usize,
}

impl OverflowCounts {
    fn record(&mut self, seq_len: usize, tuning_len: Option<usize>, model_len: usize) {
        if tuning_len.is_some_and(|t| seq_len > t) {
            self.beyond_tuning_len += 1;
        }
        if seq_len > model_len {
            self.beyond_model_len += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    /// `exp(total response NLL / total response tokens)`.
    pub pooled: f64,
    /// Arithmetic mean of the per-item perplexities.
    pub mean: f64,
    pub items: usize,
    pub per_item: Vec<f64>,
    pub overflow: OverflowCounts,
}

/// Scores every item in parallel and pools token-level NLL.
pub fn corpus_perplexity(
    model: &dyn LanguageModel,
    items: &[PerplexityItem],
    format: &PromptFormat,
    tuning_seq_len: Option<usize>,
) -> Result<PerplexityReport> {
    if items.is_empty() {
        return Err(Error::Contract("perplexity needs at least one item".into()));
    }
    let scored: Vec<_> = items
        .par_iter()
        .map(|it| response_nll(model, &it.question, &it.response, format))
        .collect::<Result<_>>()?;
    let mut overflow = OverflowCounts::default();
    for (it, s) in items.iter().zip(&scored) {
        let full = format_len(it, format)? + s.tokens;
        overflow.record(full, tuning_seq_len, model.max_seq_len());
    }
    let total_nll: f64 = scored.iter().map(|s| s.log_prob).sum();
    let total_tokens: usize = scored.iter().map(|s| s.tokens).sum();
    let per_item: Vec<f64> = scored
        .iter()
        .map(|s| (s.log_prob / s.tokens as f64).exp())
        .collect();
    Ok(PerplexityReport {
        pooled: (total_nll / total_tokens as f64).exp(),
        mean: per_item.iter().sum::<f64>() / per_item.len() as f64,
        items: items.len(),
        per_item,
        overflow,
    })
}

fn format_len(item: &PerplexityItem, format: &PromptFormat) -> Result<usize> {
    let record = crate::data::InstructionRecord {
        instruction: item.question.clone(),
        input: None,
        output: String::from("-"),
        category: crate::data::Category::Qa,
        source: String::new(),
    };
    Ok(format.render_inference(&record)?.len() + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceEvalReport {
    /// Accuracy keyed by shot count.
    pub accuracy: BTreeMap<usize, f64>,
    pub items: usize,
    /// Predicted index per item, keyed by shot count.
    pub predictions: BTreeMap<usize, Vec<usize>>,
    pub overflow: BTreeMap<usize, OverflowCounts>,
}

fn demonstrations_for(
    query: &ChoiceTask,
    pool: &[ChoiceTask],
    k: usize,
) -> Result<Vec<ChoiceTask>> {
    let demos: Vec<ChoiceTask> = pool
        .iter()
        .filter(|d| *d != query)
        .take(k)
        .cloned()
        .collect();
    if demos.len() < k {
        return Err(Error::Contract(format!(
            "{k}-shot evaluation needs {k} demonstrations distinct from the query, pool has {}",
            demos.len()
        )));
    }
    Ok(demos)
}

/// Accuracy of likelihood classification for each shot count. The first
/// `k` pool items different from the query serve as demonstrations;
/// `version` overrides each task's own prompt version when given.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_choice_tasks(
    model: &dyn LanguageModel,
    tasks: &[ChoiceTask],
    pool: &[ChoiceTask],
    format: &TaskFormat,
    shots: &[usize],
    version: Option<PromptVersion>,
    mode: ScoringMode,
    tuning_seq_len: Option<usize>,
) -> Result<ChoiceEvalReport> {
    if tasks.is_empty() {
        return Err(Error::Contract("no evaluation items".into()));
    }
    let mut report = ChoiceEvalReport {
        accuracy: BTreeMap::new(),
        items: tasks.len(),
        predictions: BTreeMap::new(),
        overflow: BTreeMap::new(),
    };
    for &k in shots {
        let results: Vec<_> = tasks
            .par_iter()
            .map(|t| {
                let spec = FewShotSpec {
                    k,
                    demonstrations: demonstrations_for(t, pool, k)?,
                };
                classify_by_likelihood(model, t, &spec, format, version.unwrap_or(t.version), mode)
            })
            .collect::<Result<_>>()?;
        let mut overflow = OverflowCounts::default();
        let mut correct = 0;
        for (t, c) in tasks.iter().zip(&results) {
            overflow.record(c.max_sequence_len, tuning_seq_len, model.max_seq_len());
            correct += usize::from(c.predicted == t.gold);
        }
        report
            .accuracy
            .insert(k, correct as f64 / tasks.len() as f64);
        report
            .predictions
            .insert(k, results.iter().map(|c| c.predicted).collect());
        report.overflow.insert(k, overflow);
    }
    Ok(report)
}

/// Combined JSON report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choice: Option<ChoiceEvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<PerplexityReport>,
}
