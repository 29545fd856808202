//! Adapter tuning loop: batch assembly with response masking, masked
//! cross-entropy and AdamW updates on trainable parameters only.

use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ByteTokenizer, InstructionRecord, PromptFormat, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::lora;
use crate::model::{DecoderModel, Mode};
use crate::tensor::{Graph, Tensor};

/// Batches prepared ahead of the optimizer.
const PIPELINE_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Loss only on response tokens (and the closing EOS).
    ResponseOnly,
    FullSequence,
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolicy::ResponseOnly => "response-only",
            MaskPolicy::FullSequence => "full-sequence",
        })
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "response-only" => Ok(MaskPolicy::ResponseOnly),
            "full-sequence" => Ok(MaskPolicy::FullSequence),
            _ => Err(Error::Validation(format!(
                "unknown mask policy {s:?} (expected response-only or full-sequence)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_seq_len: usize,
    pub mask_policy: MaskPolicy,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            epochs: 1,
            train_seq_len: 256,
            mask_policy: MaskPolicy::ResponseOnly,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model_max_seq_len: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if self.train_seq_len == 0 || self.train_seq_len > model_max_seq_len {
            return Err(Error::Validation(format!(
                "train_seq_len {} must be in 1..={model_max_seq_len}",
                self.train_seq_len
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation(
                "weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One padded training row of length `train_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

/// `[rows × seq_len]` matrices stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainingBatch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let seq_len = examples
            .first()
            .map(|e| e.inputs.len())
            .ok_or_else(|| Error::Degenerate("batch with no rows".into()))?;
        let mut b = Self {
            rows: examples.len(),
            seq_len,
            tokens: Vec::with_capacity(examples.len() * seq_len),
            targets: Vec::with_capacity(examples.len() * seq_len),
            loss_mask: Vec::with_capacity(examples.len() * seq_len),
        };
        for e in examples {
            if e.inputs.len() != seq_len {
                return Err(Error::Contract("batch rows differ in length".into()));
            }
            b.tokens.extend_from_slice(&e.inputs);
            b.targets.extend_from_slice(&e.targets);
            b.loss_mask.extend_from_slice(&e.mask);
        }
        Ok(b)
    }
}

/// Lays out `[BOS] prompt response [EOS]` as a next-token row, keeping the
/// tail when too long. Returns `None` when the response plus EOS alone do
/// not fit in `seq_len` positions.
pub fn encode_example(
    prompt: &str,
    response: &str,
    seq_len: usize,
    policy: MaskPolicy,
) -> Option<Example> {
    let tok = ByteTokenizer;
    let prompt_ids = tok.encode(prompt);
    let response_ids = tok.encode(response);
    if response_ids.len() + 1 > seq_len {
        return None;
    }
    let mut seq = Vec::with_capacity(prompt_ids.len() + response_ids.len() + 2);
    seq.push(BOS);
    seq.extend_from_slice(&prompt_ids);
    let mut response_start = seq.len();
    seq.extend_from_slice(&response_ids);
    seq.push(EOS);
    if seq.len() > seq_len + 1 {
        let cut = seq.len() - (seq_len + 1);
        seq.drain(..cut);
        response_start -= cut;
    }
    let n = seq.len() - 1;
    let mut inputs = seq[..n].to_vec();
    let mut targets = seq[1..].to_vec();
    let mut mask: Vec<bool> = (0..n)
        .map(|i| match policy {
            MaskPolicy::ResponseOnly => i + 1 >= response_start,
            MaskPolicy::FullSequence => true,
        })
        .collect();
    inputs.resize(seq_len, PAD);
    targets.resize(seq_len, PAD);
    mask.resize(seq_len, false);
    Some(Example {
        inputs,
        targets,
        mask,
    })
}

/// Encodes records through the prompt format; dropped records are counted.
pub fn encode_records(
    records: &[InstructionRecord],
    format: &PromptFormat,
    config: &TrainConfig,
) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let prompt = format.render_inference(r)?;
        match encode_example(&prompt, &r.output, config.train_seq_len, config.mask_policy) {
            Some(e) => out.push(e),
            None => {
                dropped += 1;
                log::warn!(
                    "dropping record: response of {} bytes does not fit train_seq_len {}",
                    r.output.len(),
                    config.train_seq_len
                );
            }
        }
    }
    Ok((out, dropped))
}

/// Renders, encodes, truncates, pads and masks `records` into one batch.
/// Returns the batch (absent if every record was dropped) and the drop count.
pub fn build_batch(
    records: &[InstructionRecord],
    format: &PromptFormat,
    config: &TrainConfig,
) -> Result<(Option<TrainingBatch>, usize)> {
    if records.is_empty() {
        return Err(Error::Contract(
            "build_batch needs at least one record".into(),
        ));
    }
    let (examples, dropped) = encode_records(records, format, config)?;
    if examples.is_empty() {
        return Ok((None, dropped));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    Ok((Some(TrainingBatch::from_examples(&refs)?), dropped))
}

/// Splits raw text into full-sequence rows of at most `seq_len` targets.
pub fn encode_corpus(texts: &[String], seq_len: usize) -> Vec<Example> {
    let tok = ByteTokenizer;
    let mut out = Vec::new();
    for text in texts {
        let mut seq = vec![BOS];
        seq.extend_from_slice(&tok.encode(text));
        seq.push(EOS);
        let mut start = 0;
        while start + 1 < seq.len() {
            let end = (start + seq_len + 1).min(seq.len());
            let window = &seq[start..end];
            let n = window.len() - 1;
            let mut inputs = window[..n].to_vec();
            let mut targets = window[1..].to_vec();
            let mut mask = vec![true; n];
            inputs.resize(seq_len, PAD);
            targets.resize(seq_len, PAD);
            mask.resize(seq_len, false);
            out.push(Example {
                inputs,
                targets,
                mask,
            });
            start += seq_len;
        }
    }
    out
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, gradient)` pair.
    pub fn step(&mut self, model: &mut DecoderModel, grads: Vec<(String, Tensor)>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let current: HashMap<String, Tensor> = model.trainable_parameters().into_iter().collect();
        for (name, grad) in grads {
            let param = current
                .get(&name)
                .ok_or_else(|| Error::State(format!("{name} is not trainable")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut p = param.to_vec();
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let lr = self.lr as f32;
            let wd = (self.lr * self.weight_decay) as f32;
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            let eps = self.eps as f32;
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps) + wd * p[i];
            }
            model.update_trainable(&name, Tensor::new(param.shape(), p)?)?;
        }
        Ok(())
    }
}

/// Loss and gradients of every trainable parameter on one batch.
pub fn loss_and_grads(
    model: &DecoderModel,
    batch: &TrainingBatch,
    rng: &mut dyn RngCore,
) -> Result<(f32, Vec<(String, Tensor)>)> {
    let g = Graph::new();
    let fwd = model.forward(&g, &batch.tokens, batch.seq_len, Mode::Train(rng))?;
    let loss = fwd
        .logits
        .softmax_cross_entropy(&batch.targets, &batch.loss_mask)?;
    let value = loss.value().data()[0];
    let grads = loss.backward()?;
    let named = fwd
        .trainable
        .into_iter()
        .map(|(n, v)| (n, grads.get(v)))
        .collect();
    Ok((value, named))
}

fn optimize(
    model: &mut DecoderModel,
    batch: &TrainingBatch,
    opt: &mut AdamW,
    rng: &mut dyn RngCore,
) -> Result<f32> {
    let (loss, grads) = loss_and_grads(model, batch, rng)?;
    if !loss.is_finite() {
        return Err(Error::Degenerate(format!(
            "non-finite training loss {loss}"
        )));
    }
    opt.step(model, grads)?;
    Ok(loss)
}

/// One adapter update. The model must carry unmerged adapters.
pub fn train_step(
    model: &mut DecoderModel,
    batch: &TrainingBatch,
    opt: &mut AdamW,
    rng: &mut dyn RngCore,
) -> Result<f32> {
    match model.adapters() {
        None => {
            return Err(Error::Config(
                "train_step requires injected adapters".into(),
            ))
        }
        Some(set) if set.is_merged() => return Err(Error::State("adapters are merged".into())),
        Some(_) => {}
    }
    optimize(model, batch, opt, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dropped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub step_losses: Vec<f32>,
    pub dropped: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn run_epochs(
    model: &mut DecoderModel,
    examples: &[Example],
    dropped: usize,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&DecoderModel, &EpochReport) -> Result<()>,
) -> Result<TrainReport> {
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut report = TrainReport {
        dropped,
        ..Default::default()
    };
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut order_rng);
        let mut losses = Vec::new();
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<TrainingBatch>>(PIPELINE_DEPTH);
            let order = &order;
            s.spawn(move || {
                for chunk in order.chunks(config.batch_size) {
                    let rows: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
                    if tx.send(TrainingBatch::from_examples(&rows)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                losses.push(optimize(model, &batch?, &mut opt, &mut dropout_rng)?);
            }
            Ok(())
        })?;
        let mean_loss = losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64;
        let e = EpochReport {
            epoch,
            mean_loss,
            dropped,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: mean loss {mean_loss:.4} over {} steps",
            losses.len()
        );
        report.step_losses.extend(losses);
        on_epoch(model, &e)?;
        report.epochs.push(e);
    }
    Ok(report)
}

/// Adapter tuning over `records` for `config.epochs` shuffled passes.
///
/// With `out_dir`, an adapter checkpoint `adapter-epoch-{n}.ckpt` and a line
/// of `train_report.jsonl` are written after every epoch.
pub fn train(
    model: &mut DecoderModel,
    records: &[InstructionRecord],
    format: &PromptFormat,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate(model.config().max_seq_len)?;
    if records.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    match model.adapters() {
        None => return Err(Error::Config("training requires injected adapters".into())),
        Some(set) if set.is_merged() => return Err(Error::State("adapters are merged".into())),
        Some(_) => {}
    }
    let (examples, dropped) = encode_records(records, format, config)?;
    if examples.is_empty() {
        return Err(Error::Config(format!(
            "all {dropped} records were dropped by train_seq_len {}",
            config.train_seq_len
        )));
    }
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_report.jsonl"), "")?;
    }
    let mut report = run_epochs(model, &examples, dropped, config, |m, e| {
        if let Some(dir) = out_dir {
            let path = dir.join(format!("adapter-epoch-{}.ckpt", e.epoch));
            lora::save_adapters(m, &path)?;
            checkpoints.push(path);
            let mut f = OpenOptions::new()
                .append(true)
                .open(dir.join("train_report.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    })?;
    report.checkpoints = checkpoints;
    Ok(report)
}

/// Full-parameter language-model training on raw text, used to give the
/// base model something to adapt. Refuses models with adapters.
pub fn pretrain(
    model: &mut DecoderModel,
    texts: &[String],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate(model.config().max_seq_len)?;
    if model.adapters().is_some() || model.is_base_frozen() {
        return Err(Error::State(
            "pretraining needs a model without adapters".into(),
        ));
    }
    let examples = encode_corpus(texts, config.train_seq_len);
    if examples.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    run_epochs(model, &examples, 0, config, |_, _| Ok(()))
}
