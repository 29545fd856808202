//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use instruct_forge::data::{
    load_records, render_prompt, Category, InstructionRecord, PromptFormat, PromptTemplate,
    PromptVersion, TemplateKind, VOCAB_SIZE,
};
use instruct_forge::eval::{
    apply_repetition_penalty, assemble_fewshot_prompt, classify_by_likelihood, corpus_perplexity,
    generate, response_perplexity, ChoiceTask, FewShotSpec, GenerationParams, PerplexityItem,
    ScoringMode, TaskFormat,
};
use instruct_forge::lora::{self, LoraConfig};
use instruct_forge::model::{AttentionLayout, DecoderModel, LanguageModel, ModelConfig};
use instruct_forge::tensor::gradcheck;
use instruct_forge::training::{
    self, encode_example, AdamW, MaskPolicy, TrainConfig, TrainingBatch,
};
use instruct_forge::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

struct Runner {
    failed: usize,
}

impl Runner {
    /// Runs one criterion. `extra` is shared setup time charged to it.
    fn run(
        &mut self,
        id: usize,
        name: &str,
        limit: Duration,
        extra: Duration,
        f: impl FnOnce() -> Check,
    ) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed() + extra;
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; over time limit")),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {id:>2} {name}: {detail} [{:.1}s / {}s]",
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
}

fn ensure(cond: bool, msg: String) -> Check {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn random_ids(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u32> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| rng.random_range(0..VOCAB_SIZE as u32))
        .collect()
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 4,
        max_seq_len: 128,
        attention_layout: AttentionLayout::SplitQv,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn gradient_fidelity() -> Check {
    let results = gradcheck::check_all_ops(100, 2024).map_err(|e| e.to_string())?;
    let (worst_op, worst) = results.iter().fold(
        ("", 0.0f64),
        |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc },
    );
    let bad: Vec<_> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= 1e-3)
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    if bad.is_empty() {
        Ok(format!(
            "{} ops, worst relative error {worst:.2e} ({worst_op})",
            results.len()
        ))
    } else {
        Err(format!("over tolerance: {}", bad.join(", ")))
    }
}

fn zero_init_identity() -> Check {
    let mut failures = 0;
    for layout in [AttentionLayout::SplitQv, AttentionLayout::FusedQkv] {
        let base = DecoderModel::init(ModelConfig {
            attention_layout: layout,
            ..toy_config()
        })
        .map_err(|e| e.to_string())?;
        let targets = match layout {
            AttentionLayout::SplitQv => vec!["q_proj".into(), "v_proj".into()],
            AttentionLayout::FusedQkv => vec!["query_key_value".into()],
        };
        let mut adapted = base.clone();
        lora::inject(
            &mut adapted,
            &LoraConfig {
                target_names: targets,
                ..LoraConfig::default()
            },
            3,
        )
        .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let ids = random_ids(&mut rng, 64);
            let a = base.logits(&ids).map_err(|e| e.to_string())?;
            let b = adapted.logits(&ids).map_err(|e| e.to_string())?;
            failures += usize::from(bits(&a) != bits(&b));
        }
    }
    ensure(
        failures == 0,
        format!("{failures} of 100 inputs differ (both layouts, 50 inputs each)"),
    )
}

fn merge_equivalence() -> Check {
    let mut model = DecoderModel::init(toy_config()).map_err(|e| e.to_string())?;
    lora::inject(&mut model, &LoraConfig::default(), 7).map_err(|e| e.to_string())?;
    let examples: Vec<_> = (0..4)
        .map(|i| {
            let prompt = format!("Instruction: add {i} and {i}.\nResponse: ");
            encode_example(&prompt, &format!("{}", 2 * i), 64, MaskPolicy::ResponseOnly).unwrap()
        })
        .collect();
    let batch = TrainingBatch::from_examples(&examples.iter().collect::<Vec<_>>())
        .map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(1e-2, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        training::train_step(&mut model, &batch, &mut opt, &mut rng).map_err(|e| e.to_string())?;
    }
    let b_norm: f32 = model
        .adapters()
        .unwrap()
        .iter()
        .flat_map(|a| a.b().data())
        .map(|x| x.abs())
        .sum();
    if b_norm == 0.0 {
        return Err("adapters did not move".into());
    }

    let mut merged = model.clone();
    lora::merge(&mut merged).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs: Vec<_> = (0..20).map(|_| random_ids(&mut rng, 64)).collect();
    let mut worst = 0.0f64;
    for ids in &inputs {
        let a = model.logits(ids).map_err(|e| e.to_string())?;
        let b = merged.logits(ids).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&b).map_err(|e| e.to_string())?);
    }
    lora::unmerge(&mut merged).map_err(|e| e.to_string())?;
    let restored = inputs
        .iter()
        .all(|ids| bits(&model.logits(ids).unwrap()) == bits(&merged.logits(ids).unwrap()));
    ensure(
        worst < 1e-5 && restored,
        format!("max |merged - adapted| = {worst:.2e} after 100 steps; unmerge bit-identical: {restored}"),
    )
}

fn parameter_accounting() -> Check {
    let mut model = DecoderModel::init(toy_config()).map_err(|e| e.to_string())?;
    let cfg = LoraConfig {
        r: 4,
        target_names: vec!["q_proj".into(), "v_proj".into()],
        ..LoraConfig::default()
    };
    let adapters = lora::inject(&mut model, &cfg, 0).map_err(|e| e.to_string())?;
    let count = lora::trainable_param_count(&model);
    // 4 layers x 2 targets, each (d + k) * r with d = k = 64
    let expected = 4 * 2 * (64 + 64) * 4;
    ensure(
        count == expected && expected == 4096,
        format!("{adapters} adapters, {count} trainable parameters (expected {expected})"),
    )
}

/// Row logits chosen by a closure over the prefix.
struct RowModel<F> {
    row: F,
}

impl<F: Fn(&[u32]) -> Vec<f32> + Sync> LanguageModel for RowModel<F> {
    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn max_seq_len(&self) -> usize {
        512
    }

    fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = (0..ids.len()).map(|t| (self.row)(&ids[..=t])).collect();
        Ok(Tensor::from_rows(&rows))
    }
}

fn perplexity_oracle() -> Check {
    let format = PromptFormat::builtin(PromptVersion::V02);
    let uniform = RowModel {
        row: |_: &[u32]| vec![0.0; VOCAB_SIZE],
    };
    let half = RowModel {
        row: |_: &[u32]| {
            let mut r = vec![f32::NEG_INFINITY; VOCAB_SIZE];
            r[b'x' as usize] = 0.0;
            r[b'y' as usize] = 0.0;
            r
        },
    };
    let mut worst_uniform = 0.0f64;
    for (q, r) in [
        ("What is two plus two?", "Four."),
        ("Name a colour.", "Blue, or maybe green."),
        ("Hi", "x"),
    ] {
        let p = response_perplexity(&uniform, q, r, &format).map_err(|e| e.to_string())?;
        worst_uniform = worst_uniform.max((p - VOCAB_SIZE as f64).abs());
    }
    let p =
        response_perplexity(&half, "Pick x or y.", "xyyxxy", &format).map_err(|e| e.to_string())?;
    let half_err = (p - 2.0).abs();
    ensure(
        worst_uniform < 1e-4 && half_err < 1e-9,
        format!("uniform |ppl - 259| <= {worst_uniform:.1e}; half-probability |ppl - 2| = {half_err:.1e}"),
    )
}

fn fixture(name: &str) -> String {
    let path = format!(
        "{}/../core/tests/fixtures/{name}",
        env!("CARGO_MANIFEST_DIR")
    );
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn nli(premise: &str, hypothesis: &str, gold: usize, version: PromptVersion) -> ChoiceTask {
    ChoiceTask {
        fields: [("Premise", premise), ("Hypothesis", hypothesis)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        choices: vec![
            "entailment".into(),
            "contradiction".into(),
            "neutral".into(),
        ],
        gold,
        version,
    }
}

fn prompt_byte_exactness() -> Check {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    let records = [
        (
            InstructionRecord::new(
                "Translate the sentence into English.",
                Some("猫が好きです。".into()),
                "I like cats.",
                Category::Translation,
                "fixture",
            )
            .unwrap(),
            TemplateKind::WithInput,
            "with_input",
        ),
        (
            InstructionRecord::new(
                "Name three primary colors.",
                None,
                "Red, blue and yellow.",
                Category::Qa,
                "fixture",
            )
            .unwrap(),
            TemplateKind::NoInput,
            "no_input",
        ),
    ];
    let format = TaskFormat {
        description: "Please answer the relationship between the premise and the hypothesis from entailment, \
                      contradiction, and neutral.\n\nConstraints:\n\
                      - If the hypothesis can be derived from the premise using logical or common sense knowledge, \
                      output entailment\n\
                      - If the premise and the hypothesis are incompatible, output contradiction\n\
                      - If neither of the above, output neutral"
            .into(),
        instruction: "Please answer the relationship between the given premise and hypothesis.\n\n\
                      Choose your output from the following:\nentailment\ncontradiction\nneural"
            .into(),
        answer_label: "Relationship".into(),
    };
    for version in [PromptVersion::V02, PromptVersion::V03] {
        let tag = version.to_string().replace('.', "");
        for (record, kind, name) in &records {
            let got = render_prompt(record, &PromptTemplate::builtin(*kind, version))
                .map_err(|e| e.to_string())?;
            let file = format!("prompt_{tag}_{name}.txt");
            checked += 1;
            if got != fixture(&file) {
                mismatches.push(file);
            }
        }
        let demos = vec![
            nli(
                "Two women are jumping to catch a frisbee in the grass.",
                "The women are trying to catch a frisbee.",
                0,
                version,
            ),
            nli(
                "A man is riding a red bicycle down the street.",
                "The man is sleeping in bed.",
                1,
                version,
            ),
            nli(
                "A dog runs along the beach.",
                "The dog belongs to a fisherman.",
                2,
                version,
            ),
        ];
        let query = nli(
            "There are two children, and bananas and kiwis are placed next to the mixer.",
            "There are children with droppers at the table where the mixer is placed.",
            2,
            version,
        );
        for k in 1..=3 {
            let mut demonstrations = demos.clone();
            if version == PromptVersion::V02 && k == 1 {
                // the v0.2 one-shot golden pairs the first premise with a different hypothesis
                demonstrations[0] = nli(
                    "Two women are jumping to catch a frisbee in the grass.",
                    "The two women are holding a tray with donuts on it.",
                    0,
                    version,
                );
            }
            let spec = FewShotSpec { k, demonstrations };
            let got = assemble_fewshot_prompt(&query, &spec, &format, version)
                .map_err(|e| e.to_string())?;
            let file = format!("jnli_{tag}_{k}shot.txt");
            checked += 1;
            if got != fixture(&file) {
                mismatches.push(file);
            }
        }
    }
    ensure(
        mismatches.is_empty(),
        format!(
            "{} of {checked} golden files match byte-for-byte {mismatches:?}",
            checked - mismatches.len()
        ),
    )
}

fn repetition_penalty() -> Check {
    let logits = vec![3.0f32, -2.0, 0.25, 1.0];
    let identity =
        apply_repetition_penalty(&logits, &[0, 1, 2, 3], 1.0).map_err(|e| e.to_string())?;
    if identity
        .iter()
        .map(|x| x.to_bits())
        .ne(logits.iter().map(|x| x.to_bits()))
    {
        return Err("penalty 1.0 changed logits".into());
    }
    // prefers 'a' then 'b', regardless of context
    let looping = RowModel {
        row: |_: &[u32]| {
            let mut r = vec![0.0; VOCAB_SIZE];
            r[b'a' as usize] = 2.0;
            r[b'b' as usize] = 1.5;
            r
        },
    };
    let run = |penalty: f64| {
        let params = GenerationParams {
            max_new_tokens: 12,
            repetition_penalty: penalty,
            ..GenerationParams::default()
        };
        generate(&looping, "Say something.", &params).map(|g| g.text)
    };
    let leading_run = |s: &str| {
        s.bytes()
            .take_while(|&b| Some(b) == s.bytes().next())
            .count()
    };
    let plain = run(1.0).map_err(|e| e.to_string())?;
    let penalised = run(1.5).map_err(|e| e.to_string())?;
    ensure(
        leading_run(&penalised) < leading_run(&plain),
        format!(
            "repeat run {} at penalty 1.0 ({plain:?}) vs {} at 1.5 ({penalised:?})",
            leading_run(&plain),
            leading_run(&penalised)
        ),
    )
}

/// Invented words carry their category in the suffix; every property value is
/// determined by the category.
const SUFFIXES: [&str; 3] = ["ox", "elle", "ik"];
const PROPERTIES: [(&str, [&str; 3]); 6] = [
    ("type", ["animal", "fruit", "tool"]),
    ("color", ["brown", "yellow", "grey"]),
    ("home", ["forest", "orchard", "shed"]),
    ("sound", ["roar", "crunch", "clank"]),
    ("size", ["large", "small", "long"]),
    ("smell", ["musky", "sweet", "oily"]),
];

struct World {
    known: Vec<(String, usize)>,
    unseen: Vec<(String, usize)>,
    base: DecoderModel,
}

fn invent_words(
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
    n: usize,
) -> Vec<(String, usize)> {
    let consonants = b"bdfgklmnprstvz";
    let vowels = b"aeiou";
    let mut out = Vec::new();
    while out.len() < n {
        let category = out.len() % 3;
        let mut w = String::new();
        for _ in 0..rng.random_range(1..=2) {
            w.push(consonants[rng.random_range(0..consonants.len())] as char);
            w.push(vowels[rng.random_range(0..vowels.len())] as char);
        }
        w.push(consonants[rng.random_range(0..consonants.len())] as char);
        w.push_str(SUFFIXES[category]);
        if seen.insert(w.clone()) {
            out.push((w, category));
        }
    }
    out
}

fn tuning_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        epochs,
        train_seq_len: 256,
        mask_policy: MaskPolicy::ResponseOnly,
        ..TrainConfig::default()
    }
}

fn adapter_config() -> LoraConfig {
    LoraConfig {
        r: 8,
        alpha: 16.0,
        dropout: 0.05,
        target_names: ["q_proj", "v_proj", "o_proj", "up_proj", "down_proj"]
            .map(String::from)
            .to_vec(),
    }
}

/// Pretrains the toy base on plain property sentences about the known words.
fn pretrain_world() -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen = HashSet::new();
    let known = invent_words(&mut rng, &mut seen, 300);
    let unseen = invent_words(&mut rng, &mut seen, 300);
    let mut sentences: Vec<String> = known
        .iter()
        .flat_map(|(w, c)| {
            PROPERTIES
                .iter()
                .map(move |(p, values)| format!("The {p} of the {w} is {}.", values[*c]))
        })
        .collect();
    let mut texts = Vec::new();
    for _ in 0..8 {
        sentences.shuffle(&mut rng);
        texts.extend(sentences.chunks(10).map(|c| c.join(" ")));
    }
    let mut base = DecoderModel::init(ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        max_seq_len: 512,
        ..ModelConfig::default()
    })?;
    let config = TrainConfig {
        mask_policy: MaskPolicy::FullSequence,
        ..tuning_config(1)
    };
    training::pretrain(&mut base, &texts, &config)?;
    Ok(World {
        known,
        unseen,
        base,
    })
}

fn tuned_perplexity(world: &World) -> Check {
    let qa = |w: &str, c: usize| {
        (
            format!("Where does the {w} live?"),
            format!("The {w} lives in the {}.", PROPERTIES[2].1[c]),
        )
    };
    let records: Vec<_> = world.known[..200]
        .iter()
        .map(|(w, c)| {
            let (q, a) = qa(w, *c);
            InstructionRecord::new(q, None, a, Category::Qa, "synthetic").unwrap()
        })
        .collect();
    let held_out: Vec<_> = world.known[200..260]
        .iter()
        .map(|(w, c)| {
            let (question, response) = qa(w, *c);
            PerplexityItem { question, response }
        })
        .collect();
    let format = PromptFormat::builtin(PromptVersion::V03);
    let before = corpus_perplexity(&world.base, &held_out, &format, None)
        .map_err(|e| e.to_string())?
        .pooled;
    let mut tuned = world.base.clone();
    lora::inject(&mut tuned, &adapter_config(), 0).map_err(|e| e.to_string())?;
    training::train(&mut tuned, &records, &format, &tuning_config(3), None)
        .map_err(|e| e.to_string())?;
    let after = corpus_perplexity(&tuned, &held_out, &format, None)
        .map_err(|e| e.to_string())?
        .pooled;
    let drop = 1.0 - after / before;
    ensure(
        drop >= 0.2,
        format!(
            "held-out perplexity {before:.2} -> {after:.2} ({:.1}% lower, need >= 20%)",
            100.0 * drop
        ),
    )
}

/// Tuning seeds for the unseen-task check. Single runs at this scale either
/// transfer or collapse onto one label, so the mean over fixed seeds is
/// reported together with every run.
const TRANSFER_SEEDS: [u64; 3] = [0, 1, 2];

fn unseen_task_accuracy(world: &World) -> Check {
    let (property, labels) = PROPERTIES[0];
    let task_format = TaskFormat {
        instruction: format!("What is the {property} of this thing?"),
        ..TaskFormat::default()
    };
    let spec = FewShotSpec {
        k: 0,
        demonstrations: Vec::new(),
    };
    let accuracy = |model: &DecoderModel| -> Result<f64> {
        let mut correct = 0;
        for (w, c) in &world.unseen {
            let task = ChoiceTask {
                fields: IndexMap::from([("Word".to_string(), w.clone())]),
                choices: labels.map(String::from).to_vec(),
                gold: *c,
                version: PromptVersion::V03,
            };
            let out = classify_by_likelihood(
                model,
                &task,
                &spec,
                &task_format,
                PromptVersion::V03,
                ScoringMode::Raw,
            )?;
            correct += usize::from(out.predicted == *c);
        }
        Ok(correct as f64 / world.unseen.len() as f64)
    };

    // every property except the evaluated one
    let mut records = Vec::new();
    for (w, c) in &world.known {
        for (p, values) in &PROPERTIES[1..] {
            records.push(
                InstructionRecord::new(
                    format!("What is the {p} of this thing?"),
                    Some(w.clone()),
                    values[*c],
                    Category::Qa,
                    "synthetic",
                )
                .unwrap(),
            );
        }
    }
    let format = PromptFormat::builtin(PromptVersion::V03);
    let tune = |seed: u64| -> Result<f64> {
        let mut order = records.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut tuned = world.base.clone();
        lora::inject(&mut tuned, &adapter_config(), seed)?;
        let config = TrainConfig {
            seed,
            ..tuning_config(3)
        };
        training::train(&mut tuned, &order, &format, &config, None)?;
        accuracy(&tuned)
    };
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = TRANSFER_SEEDS
            .iter()
            .map(|&seed| s.spawn(move || tune(seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| "tuning thread panicked".to_string())?
                    .map_err(|e| e.to_string())
            })
            .collect::<std::result::Result<Vec<f64>, String>>()
    })?;
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let base = accuracy(&world.base).map_err(|e| e.to_string())?;
    let per_seed: Vec<_> = runs.iter().map(|a| format!("{a:.3}")).collect();
    ensure(
        mean >= 1.0 / 3.0 + 0.10,
        format!(
            "mean accuracy on {} unseen items {mean:.3} over seeds {TRANSFER_SEEDS:?} ({}), base {base:.3}, need >= {:.3}",
            world.unseen.len(),
            per_seed.join(", "),
            1.0 / 3.0 + 0.10
        ),
    )
}

fn filter_correctness() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let src = dir.path().join("sources");
    std::fs::create_dir(&src).map_err(|e| e.to_string())?;
    let categories = [
        Category::Qa,
        Category::Translation,
        Category::Summarization,
        Category::Commonsense,
        Category::Translation,
        Category::Correction,
        Category::ReadingComprehension,
        Category::Translation,
        Category::Simplification,
        Category::Other,
    ];
    let records: Vec<_> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let input = (i % 2 == 0).then(|| format!("input {i}"));
            InstructionRecord::new(
                format!("Task {i}."),
                input,
                format!("output {i}"),
                *c,
                "mixed",
            )
            .unwrap()
        })
        .collect();
    // two source files, read in name order
    for (name, part) in [("a.jsonl", &records[..6]), ("b.jsonl", &records[6..])] {
        let text: String = part
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        std::fs::write(src.join(name), text).map_err(|e| e.to_string())?;
    }
    let output = dir.path().join("dataset.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_instruct-forge"))
        .env_remove("INSTRUCT_FORGE_SEED")
        .args(["build-dataset", "--input-dir"])
        .arg(&src)
        .args(["--exclude", "translation", "--output"])
        .arg(&output)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let (kept, _) = load_records(Path::new(&output)).map_err(|e| e.to_string())?;
    let expected: Vec<_> = records
        .iter()
        .filter(|r| r.category != Category::Translation)
        .cloned()
        .collect();
    let translations = kept
        .iter()
        .filter(|r| r.category == Category::Translation)
        .count();
    ensure(
        translations == 0 && kept == expected,
        format!(
            "{} of {} records kept, {translations} translation records, order preserved: {}",
            kept.len(),
            records.len(),
            kept == expected
        ),
    )
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut runner = Runner { failed: 0 };
    runner.run(
        1,
        "gradient fidelity",
        secs(60),
        Duration::ZERO,
        gradient_fidelity,
    );
    runner.run(
        2,
        "LoRA zero-init identity",
        secs(5),
        Duration::ZERO,
        zero_init_identity,
    );
    runner.run(
        3,
        "merge equivalence",
        secs(30),
        Duration::ZERO,
        merge_equivalence,
    );
    runner.run(
        4,
        "parameter accounting",
        secs(1),
        Duration::ZERO,
        parameter_accounting,
    );
    runner.run(
        5,
        "perplexity oracle",
        secs(5),
        Duration::ZERO,
        perplexity_oracle,
    );
    runner.run(
        6,
        "prompt byte-exactness",
        secs(5),
        Duration::ZERO,
        prompt_byte_exactness,
    );
    runner.run(
        7,
        "repetition-penalty contract",
        secs(10),
        Duration::ZERO,
        repetition_penalty,
    );

    // criteria 8 and 9 share the pretrained base; its cost is charged to both
    let start = Instant::now();
    let world = panic::catch_unwind(pretrain_world);
    let pretrain_time = start.elapsed();
    match world {
        Ok(Ok(world)) => {
            runner.run(
                8,
                "tuned perplexity improves",
                secs(600),
                pretrain_time,
                || tuned_perplexity(&world),
            );
            runner.run(
                9,
                "unseen-task classification",
                secs(600),
                pretrain_time,
                || unseen_task_accuracy(&world),
            );
        }
        failure => {
            let msg = match failure {
                Ok(Err(e)) => e.to_string(),
                _ => "pretraining panicked".into(),
            };
            for (id, name) in [
                (8, "tuned perplexity improves"),
                (9, "unseen-task classification"),
            ] {
                runner.run(id, name, secs(600), pretrain_time, || {
                    Err(format!("pretraining failed: {msg}"))
                });
            }
        }
    }
    runner.run(
        10,
        "dataset filter correctness",
        secs(5),
        Duration::ZERO,
        filter_correctness,
    );

    println!("{} of 10 criteria passed", 10 - runner.failed);
    if runner.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
