//! Command-line surface for the instruct-forge pipeline.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use instruct_forge::data::{
    dataset_stats, filter_by_category, load_records, parse_records, write_records,
    ConversionTemplates, InstructionRecord, PromptFormat, QaPair, TypoPair,
};
use instruct_forge::eval::{
    self, corpus_perplexity, evaluate_choice_tasks, load_choice_tasks, load_perplexity_items,
    EvalReport, TaskFormat,
};
use instruct_forge::lora;
use instruct_forge::model::DecoderModel;
use instruct_forge::training;
use serde::de::DeserializeOwned;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "instruct-forge",
    version,
    about = "Build instruction data, LoRA-tune and evaluate small causal LMs"
)]
pub struct Cli {
    /// Key-value config file (`section.key = value` per line).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw. Falls back to INSTRUCT_FORGE_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge instruction sources into one filtered JSON Lines dataset.
    BuildDataset(BuildDatasetArgs),
    /// Full-parameter language-model training of a fresh base model.
    Pretrain(PretrainArgs),
    /// LoRA-tune a base model on an instruction dataset.
    Train(TrainArgs),
    /// Few-shot likelihood classification accuracy.
    Eval(EvalArgs),
    /// Response-only perplexity over question/response pairs.
    Ppl(PplArgs),
    /// Decode a continuation for one prompt.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory of `*.jsonl` instruction record files.
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    /// JSON Lines of `{wrong, corrected}` typo pairs.
    #[arg(long)]
    pub typo_pairs: Option<PathBuf>,
    /// JSON Lines of `{question, answer}` pairs.
    #[arg(long)]
    pub qa_pairs: Option<PathBuf>,
    /// Comma-separated categories to drop, e.g. `translation`.
    #[arg(long)]
    pub exclude: Option<String>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// `fused-qkv` or `split-qv`.
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// `response-only` or `full-sequence`.
    #[arg(long)]
    pub mask_policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Plain text (one document per line) or `.jsonl` instruction records.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub prompt_version: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON Lines instruction dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Base checkpoint; a freshly initialized model when absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Directory for adapter checkpoints and the training report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Comma-separated weight-name patterns, e.g. `q_proj,v_proj`.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub prompt_version: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Fold the adapter into the base weights before running.
    #[arg(long)]
    pub merge: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// JSON Lines of `{fields, choices, gold, version}`.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Demonstration pool; the task file itself when absent.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// JSON `{description, instruction, answer_label}`.
    #[arg(long)]
    pub format: Option<PathBuf>,
    /// Comma-separated shot counts, e.g. `1,2,3`.
    #[arg(long)]
    pub shots: Option<String>,
    /// Overrides the version stored with each task.
    #[arg(long)]
    pub prompt_version: Option<String>,
    /// `raw` or `length-normalized`.
    #[arg(long)]
    pub scoring: Option<String>,
    /// Tuning window used to count overlong items.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PplArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// JSON Lines of `{question, response}`.
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub prompt_version: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Raw prompt text.
    #[arg(long, conflicts_with = "instruction")]
    pub prompt: Option<String>,
    /// Instruction rendered through the prompt template.
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long, requires = "instruction")]
    pub input: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub repetition_penalty: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub prompt_version: Option<String>,
}

type Overrides = Vec<(&'static str, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &'static str, value: &Option<T>) {
    if let Some(v) = value {
        o.push((key, v.to_string()));
    }
}

impl ModelFlags {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "model.d_model", &self.d_model);
        push(o, "model.n_heads", &self.n_heads);
        push(o, "model.n_layers", &self.n_layers);
        push(o, "model.max_seq_len", &self.max_seq_len);
        push(o, "model.attention_layout", &self.layout);
    }
}

impl TrainFlags {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "train.lr", &self.lr);
        push(o, "train.batch", &self.batch);
        push(o, "train.epochs", &self.epochs);
        push(o, "train.seq_len", &self.seq_len);
        push(o, "train.mask_policy", &self.mask_policy);
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::new();
        push(&mut o, "seed", &self.seed);
        match &self.command {
            Command::BuildDataset(a) => push(&mut o, "data.exclude", &a.exclude),
            Command::Pretrain(a) => {
                a.model.overrides(&mut o);
                a.train.overrides(&mut o);
                push(&mut o, "prompt.version", &a.prompt_version);
            }
            Command::Train(a) => {
                a.model.overrides(&mut o);
                a.train.overrides(&mut o);
                push(&mut o, "lora.rank", &a.rank);
                push(&mut o, "lora.alpha", &a.alpha);
                push(&mut o, "lora.dropout", &a.dropout);
                push(&mut o, "lora.targets", &a.targets);
                push(&mut o, "prompt.version", &a.prompt_version);
            }
            Command::Eval(a) => {
                push(&mut o, "eval.shots", &a.shots);
                push(&mut o, "prompt.version", &a.prompt_version);
                push(&mut o, "eval.scoring", &a.scoring);
            }
            Command::Ppl(a) => push(&mut o, "prompt.version", &a.prompt_version),
            Command::Generate(a) => {
                push(&mut o, "generate.temperature", &a.temperature);
                push(&mut o, "generate.repetition_penalty", &a.repetition_penalty);
                push(&mut o, "generate.max_new_tokens", &a.max_new_tokens);
                push(&mut o, "prompt.version", &a.prompt_version);
            }
        }
        o
    }
}

fn echo(cfg: &RunConfig) {
    eprintln!("# effective config");
    eprintln!("{cfg}");
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    println!("{text}");
    if let Some(p) = path {
        std::fs::write(p, format!("{text}\n"))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let overrides = cli.overrides();
    let borrowed: Vec<(&str, String)> = overrides.iter().map(|(k, v)| (*k, v.clone())).collect();
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &borrowed)?;
    match &cli.command {
        Command::BuildDataset(a) => {
            echo(&cfg);
            build_dataset(a, &cfg)
        }
        Command::Pretrain(a) => {
            echo(&cfg);
            pretrain(a, &cfg)
        }
        Command::Train(a) => train(a, &mut cfg),
        Command::Eval(a) => evaluate(a, &mut cfg),
        Command::Ppl(a) => perplexity(a, &mut cfg),
        Command::Generate(a) => generate(a, &mut cfg),
    }
}

fn build_dataset(a: &BuildDatasetArgs, cfg: &RunConfig) -> Result<()> {
    let mut records: Vec<InstructionRecord> = Vec::new();
    if let Some(dir) = &a.input_dir {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for f in files {
            let text = std::fs::read_to_string(&f)?;
            records.extend(parse_records(&text, &f)?);
        }
    }
    let conv = ConversionTemplates::default();
    if let Some(path) = &a.typo_pairs {
        for p in read_jsonl::<TypoPair>(path)? {
            records.push(conv.convert_typo_pair(&p.wrong, &p.corrected)?);
        }
    }
    if let Some(path) = &a.qa_pairs {
        for p in read_jsonl::<QaPair>(path)? {
            records.push(conv.convert_qa_pair(&p.question, &p.answer)?);
        }
    }
    if records.is_empty() {
        bail!("no records found in the given sources");
    }
    let kept = filter_by_category(records, &cfg.exclude);
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_records(&a.output, &kept)?;
    println!("{}", serde_json::to_string_pretty(&dataset_stats(&kept))?);
    Ok(())
}

fn pretrain(a: &PretrainArgs, cfg: &RunConfig) -> Result<()> {
    let texts: Vec<String> = if a.corpus.extension().is_some_and(|x| x == "jsonl") {
        let (records, _) = load_records(&a.corpus)?;
        let format = PromptFormat::builtin(cfg.prompt_version);
        records
            .iter()
            .map(|r| format.render(r))
            .collect::<Result<_, _>>()?
    } else {
        std::fs::read_to_string(&a.corpus)
            .with_context(|| format!("reading {}", a.corpus.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    };
    let mut model = DecoderModel::init(cfg.model.clone())?;
    let report = training::pretrain(&mut model, &texts, &cfg.train)?;
    model.save_checkpoint(&a.output)?;
    print!("{}", report.to_jsonl()?);
    Ok(())
}

fn train(a: &TrainArgs, cfg: &mut RunConfig) -> Result<()> {
    let mut model = match &a.base {
        Some(path) => {
            let m = DecoderModel::load_checkpoint(path)?;
            cfg.adopt_model(m.config());
            cfg.validate()?;
            m
        }
        None => DecoderModel::init(cfg.model.clone())?,
    };
    echo(cfg);
    let (records, _) = load_records(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    if a.base.is_none() {
        model.save_checkpoint(&a.out.join("base.ckpt"))?;
    }
    let adapters = lora::inject(&mut model, &cfg.lora, cfg.seed)?;
    eprintln!(
        "{adapters} adapters, {} trainable parameters",
        lora::trainable_param_count(&model)
    );
    let format = PromptFormat::builtin(cfg.prompt_version);
    let report = training::train(&mut model, &records, &format, &cfg.train, Some(&a.out))?;
    lora::save_adapters(&model, &a.out.join("adapter.ckpt"))?;
    print!("{}", report.to_jsonl()?);
    Ok(())
}

fn load_model(src: &ModelSource, cfg: &mut RunConfig) -> Result<DecoderModel> {
    let mut model = DecoderModel::load_checkpoint(&src.base)?;
    if let Some(path) = &src.adapter {
        lora::load_adapters(&mut model, path)?;
        if src.merge {
            lora::merge(&mut model)?;
        }
    } else if src.merge {
        bail!("--merge needs --adapter");
    }
    cfg.adopt_model(model.config());
    cfg.validate()?;
    echo(cfg);
    Ok(model)
}

fn evaluate(a: &EvalArgs, cfg: &mut RunConfig) -> Result<()> {
    let tasks = load_choice_tasks(&a.tasks)?;
    let pool = match &a.demos {
        Some(p) => load_choice_tasks(p)?,
        None => tasks.clone(),
    };
    let format: TaskFormat = match &a.format {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TaskFormat::default(),
    };
    let model = load_model(&a.source, cfg)?;
    let version = a.prompt_version.as_ref().map(|_| cfg.prompt_version);
    let report = evaluate_choice_tasks(
        &model,
        &tasks,
        &pool,
        &format,
        &cfg.shots,
        version,
        cfg.scoring,
        a.seq_len,
    )?;
    let out = EvalReport {
        choice: Some(report),
        perplexity: None,
    };
    write_output(a.output.as_deref(), &serde_json::to_string_pretty(&out)?)
}

fn perplexity(a: &PplArgs, cfg: &mut RunConfig) -> Result<()> {
    let items = load_perplexity_items(&a.items)?;
    let model = load_model(&a.source, cfg)?;
    let format = PromptFormat::builtin(cfg.prompt_version);
    let report = corpus_perplexity(&model, &items, &format, a.seq_len)?;
    let out = EvalReport {
        choice: None,
        perplexity: Some(report),
    };
    write_output(a.output.as_deref(), &serde_json::to_string_pretty(&out)?)
}

fn generate(a: &GenerateArgs, cfg: &mut RunConfig) -> Result<()> {
    let prompt = match (&a.prompt, &a.instruction) {
        (Some(p), _) => p.clone(),
        (None, Some(instruction)) => {
            let record = InstructionRecord {
                instruction: instruction.clone(),
                input: a.input.clone().filter(|s| !s.is_empty()),
                output: String::new(),
                category: instruct_forge::data::Category::Other,
                source: String::new(),
            };
            PromptFormat::builtin(cfg.prompt_version).render_inference(&record)?
        }
        (None, None) => bail!("give --prompt or --instruction"),
    };
    let model = load_model(&a.source, cfg)?;
    let g = eval::generate(&model, &prompt, &cfg.generate)?;
    if g.truncated {
        log::warn!("generation stopped at the context limit");
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", g.text)?;
    Ok(())
}
