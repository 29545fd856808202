use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ByteTokenizer, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// 0 selects greedy argmax decoding.
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub stop_token: Option<u32>,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            repetition_penalty: 1.0,
            max_new_tokens: 128,
            stop_token: Some(EOS),
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::Validation(format!(
                "repetition penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Decoded continuation, without the prompt.
    pub text: String,
    pub tokens: Vec<u32>,
    /// Decoding stopped because the context filled up.
    pub truncated: bool,
}

/// CTRL-style penalty on every distinct id in `generated`: positive logits
/// are divided by `penalty`, the rest multiplied.
pub fn apply_repetition_penalty(
    logits: &[f32],
    generated: &[u32],
    penalty: f64,
) -> Result<Vec<f32>> {
    if penalty.is_nan() || penalty < 1.0 {
        return Err(Error::Contract(format!(
            "repetition penalty must be >= 1, got {penalty}"
        )));
    }
    let mut out = logits.to_vec();
    let mut seen = vec![false; logits.len()];
    for &id in generated {
        let i = id as usize;
        if i >= logits.len() {
            return Err(Error::TokenRange {
                id,
                vocab: logits.len(),
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        let x = out[i] as f64;
        out[i] = if x > 0.0 { x / penalty } else { x * penalty } as f32;
    }
    Ok(out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive decoding after `[BOS] prompt`.
pub fn generate(
    model: &dyn LanguageModel,
    prompt: &str,
    params: &GenerationParams,
) -> Result<Generation> {
    params.validate()?;
    let tok = ByteTokenizer;
    let mut ids = vec![BOS];
    ids.extend_from_slice(&tok.encode(prompt));
    let max = model.max_seq_len();
    if ids.len() > max {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut generated = Vec::new();
    let mut truncated = false;
    while generated.len() < params.max_new_tokens {
        if ids.len() >= max {
            truncated = true;
            break;
        }
        let logits = model.logits(&ids)?;
        let last = logits.row(ids.len() - 1);
        let row = apply_repetition_penalty(last, &generated, params.repetition_penalty)?;
        let next = if params.temperature == 0.0 {
            argmax(&row)
        } else {
            let t = params.temperature;
            let max_logit = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
            let weights: Vec<f64> = row
                .iter()
                .map(|&x| ((x as f64 - max_logit) / t).exp())
                .collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::Degenerate(format!("cannot sample from logits: {e}")))?
                .sample(&mut rng)
        } as u32;
        if Some(next) == params.stop_token {
            break;
        }
        generated.push(next);
        ids.push(next);
    }
    Ok(Generation {
        text: tok.decode(&generated)?,
        tokens: generated,
        truncated,
    })
}
