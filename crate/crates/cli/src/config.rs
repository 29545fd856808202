//! Run configuration: defaults, then a `section.key = value` file, then
//! command-line overrides, all through the same setter.

use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use instruct_forge::data::{Category, PromptVersion};
use instruct_forge::eval::{GenerationParams, ScoringMode};
use instruct_forge::lora::LoraConfig;
use instruct_forge::model::ModelConfig;
use instruct_forge::training::TrainConfig;

pub const SEED_ENV: &str = "INSTRUCT_FORGE_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub prompt_version: PromptVersion,
    pub exclude: Vec<Category>,
    pub shots: Vec<usize>,
    pub scoring: ScoringMode,
    pub generate: GenerationParams,
    seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            prompt_version: PromptVersion::V02,
            exclude: Vec::new(),
            shots: vec![1, 2, 3],
            scoring: ScoringMode::Raw,
            generate: GenerationParams::default(),
            seed_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.seed_set = true;
            }
            "model.vocab_size" => self.model.vocab_size = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "model.attention_layout" => self.model.attention_layout = parse(key, v)?,
            "lora.rank" => self.lora.r = parse(key, v)?,
            "lora.alpha" => self.lora.alpha = parse(key, v)?,
            "lora.dropout" => self.lora.dropout = parse(key, v)?,
            "lora.targets" => self.lora.target_names = list(key, v)?,
            "train.lr" => self.train.learning_rate = parse(key, v)?,
            "train.batch" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.seq_len" => self.train.train_seq_len = parse(key, v)?,
            "train.mask_policy" => self.train.mask_policy = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "prompt.version" => self.prompt_version = parse(key, v)?,
            "data.exclude" => self.exclude = list(key, v)?,
            "eval.shots" => self.shots = list(key, v)?,
            "eval.scoring" => self.scoring = parse(key, v)?,
            "generate.temperature" => self.generate.temperature = parse(key, v)?,
            "generate.repetition_penalty" => self.generate.repetition_penalty = parse(key, v)?,
            "generate.max_new_tokens" => self.generate.max_new_tokens = parse(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Builds the effective configuration and checks every field.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(path) = file {
            c.apply_file(path)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        if !c.seed_set {
            if let Ok(v) = std::env::var(SEED_ENV) {
                c.seed = parse(SEED_ENV, &v)?;
            }
        }
        c.propagate_seed();
        c.validate()?;
        Ok(c)
    }

    fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.generate.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        if self.lora.target_names.is_empty() {
            bail!("lora.targets must name at least one weight");
        }
        self.train.validate(self.model.max_seq_len)?;
        if self.shots.is_empty() {
            bail!("eval.shots must list at least one shot count");
        }
        if let Some(k) = self.shots.iter().find(|&&k| k > 3) {
            bail!("eval.shots entries must be 0..=3, got {k}");
        }
        self.generate.validate()?;
        Ok(())
    }

    /// Replaces the model section with a loaded checkpoint's configuration,
    /// shrinking the training window to its context if needed.
    pub fn adopt_model(&mut self, model: &ModelConfig) {
        self.model = model.clone();
        self.model.seed = self.seed;
        if self.train.train_seq_len > model.max_seq_len {
            log::info!(
                "train.seq_len {} clamped to the checkpoint context {}",
                self.train.train_seq_len,
                model.max_seq_len
            );
            self.train.train_seq_len = model.max_seq_len;
        }
    }
}

impl fmt::Display for RunConfig {
    /// Every key in the form accepted by [`RunConfig::apply_text`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let l = &self.lora;
        let t = &self.train;
        let g = &self.generate;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "model.vocab_size = {}", m.vocab_size)?;
        writeln!(f, "model.d_model = {}", m.d_model)?;
        writeln!(f, "model.n_heads = {}", m.n_heads)?;
        writeln!(f, "model.n_layers = {}", m.n_layers)?;
        writeln!(f, "model.max_seq_len = {}", m.max_seq_len)?;
        writeln!(f, "model.attention_layout = {}", m.attention_layout)?;
        writeln!(f, "lora.rank = {}", l.r)?;
        writeln!(f, "lora.alpha = {}", l.alpha)?;
        writeln!(f, "lora.dropout = {}", l.dropout)?;
        writeln!(f, "lora.targets = {}", l.target_names.join(","))?;
        writeln!(f, "train.lr = {}", t.learning_rate)?;
        writeln!(f, "train.batch = {}", t.batch_size)?;
        writeln!(f, "train.epochs = {}", t.epochs)?;
        writeln!(f, "train.seq_len = {}", t.train_seq_len)?;
        writeln!(f, "train.mask_policy = {}", t.mask_policy)?;
        writeln!(f, "train.weight_decay = {}", t.weight_decay)?;
        writeln!(f, "prompt.version = {}", self.prompt_version)?;
        writeln!(f, "data.exclude = {}", join(&self.exclude))?;
        writeln!(f, "eval.shots = {}", join(&self.shots))?;
        writeln!(f, "eval.scoring = {}", self.scoring)?;
        writeln!(f, "generate.temperature = {}", g.temperature)?;
        writeln!(f, "generate.repetition_penalty = {}", g.repetition_penalty)?;
        write!(f, "generate.max_new_tokens = {}", g.max_new_tokens)
    }
}
