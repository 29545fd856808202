use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use instruct_forge::data::{Category, InstructionRecord, PromptFormat, PromptVersion};
use instruct_forge::eval::{response_perplexity, ChoiceTask};
use instruct_forge::lora;
use instruct_forge::model::DecoderModel;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_instruct-forge"));
    c.env_remove("INSTRUCT_FORGE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn record(i: usize, category: Category) -> InstructionRecord {
    InstructionRecord::new(
        format!("Repeat {i}."),
        None,
        format!("{i}"),
        category,
        "fixture",
    )
    .unwrap()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) {
    let text: String = items
        .iter()
        .map(|x| serde_json::to_string(x).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

const TINY: [&str; 10] = [
    "--d-model",
    "16",
    "--n-heads",
    "2",
    "--n-layers",
    "2",
    "--max-seq-len",
    "192",
    "--seq-len",
    "192",
];

/// Trains a tiny adapter and returns `(base, adapter)` paths.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("train.jsonl");
    write_jsonl(
        &data,
        &(0..16).map(|i| record(i, Category::Qa)).collect::<Vec<_>>(),
    );
    let out = dir.join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--seed",
        "5",
    ];
    args.extend(TINY);
    ok(&args);
    (out.join("base.ckpt"), out.join("adapter.ckpt"))
}

#[test]
fn build_dataset_excludes_translation() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    write_jsonl(
        &src.join("a.jsonl"),
        &[record(0, Category::Qa), record(1, Category::Translation)],
    );
    write_jsonl(
        &src.join("b.jsonl"),
        &[
            record(2, Category::Translation),
            record(3, Category::Summarization),
        ],
    );
    let output = dir.path().join("out/data.jsonl");
    let out = ok(&[
        "build-dataset",
        "--input-dir",
        s(&src),
        "--exclude",
        "translation",
        "--output",
        s(&output),
    ]);
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(manifest["by_category"]["translation"], 0);
    assert_eq!(manifest["total"], 2);
    let (kept, _) = instruct_forge::data::load_records(&output).unwrap();
    assert_eq!(
        kept,
        vec![record(0, Category::Qa), record(3, Category::Summarization)]
    );
}

#[test]
fn typo_pairs_become_correction_records() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("typos.jsonl");
    let rows: Vec<_> = (0..5)
        .map(|i| serde_json::json!({"wrong": format!("teh {i}"), "corrected": format!("the {i}")}))
        .collect();
    write_jsonl(&pairs, &rows);
    let output = dir.path().join("data.jsonl");
    let out = ok(&[
        "build-dataset",
        "--typo-pairs",
        s(&pairs),
        "--output",
        s(&output),
    ]);
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(manifest["by_category"]["correction"], 5);
}

#[test]
fn empty_input_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "build-dataset",
        "--input-dir",
        s(dir.path()),
        "--output",
        s(&dir.path().join("x.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn one_epoch_one_report_line_and_adapter_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    write_jsonl(
        &data,
        &(0..16).map(|i| record(i, Category::Qa)).collect::<Vec<_>>(),
    );
    let out_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--epochs",
        "1",
        "--targets",
        "q_proj,v_proj",
    ];
    args.extend(TINY);
    let out = ok(&args);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    let report = std::fs::read_to_string(out_dir.join("train_report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("4 adapters"));
    let mut base = DecoderModel::load_checkpoint(&out_dir.join("base.ckpt")).unwrap();
    lora::load_adapters(&mut base, &out_dir.join("adapter.ckpt")).unwrap();
    assert_eq!(base.adapters().unwrap().len(), 2 * base.config().n_layers);
}

#[test]
fn rank_zero_is_rejected_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    write_jsonl(&data, &[record(0, Category::Qa)]);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--rank",
        "0",
    ]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
}

#[test]
fn config_file_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data.exclude = translation\nseed = 9\n").unwrap();
    write_jsonl(
        &dir.path().join("a.jsonl"),
        &[record(0, Category::Translation), record(1, Category::Qa)],
    );
    let output = dir.path().join("out.jsonl");
    let out = ok(&[
        "--config",
        s(&cfg),
        "build-dataset",
        "--input-dir",
        s(dir.path()),
        "--output",
        s(&output),
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("data.exclude = translation"));
    assert!(stderr.contains("seed = 9"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(&dir.path().join("a.jsonl"), &[record(0, Category::Qa)]);
    let out = bin()
        .args([
            "build-dataset",
            "--input-dir",
            s(dir.path()),
            "--output",
            s(&dir.path().join("o.jsonl")),
        ])
        .env("INSTRUCT_FORGE_SEED", "77")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed = 77"));
}

#[test]
fn eval_reports_three_shot_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (base, adapter) = trained(dir.path());
    let tasks = dir.path().join("tasks.jsonl");
    let items: Vec<ChoiceTask> = (0..5)
        .map(|i| ChoiceTask {
            fields: [("Q".to_string(), format!("item {i}"))]
                .into_iter()
                .collect(),
            choices: vec!["yes".into(), "no".into(), "maybe".into()],
            gold: i % 3,
            version: PromptVersion::V03,
        })
        .collect();
    write_jsonl(&tasks, &items);
    let out = ok(&[
        "eval",
        "--base",
        s(&base),
        "--adapter",
        s(&adapter),
        "--tasks",
        s(&tasks),
        "--shots",
        "1,2,3",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["choice"]["accuracy"].as_object().unwrap();
    assert_eq!(acc.len(), 3);
    for v in acc.values() {
        let a = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn ppl_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (base, adapter) = trained(dir.path());
    let items = dir.path().join("ppl.jsonl");
    write_jsonl(
        &items,
        &[serde_json::json!({"question": "Repeat 3.", "response": "3"})],
    );
    let out = ok(&[
        "ppl",
        "--base",
        s(&base),
        "--adapter",
        s(&adapter),
        "--items",
        s(&items),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let cli = report["perplexity"]["pooled"].as_f64().unwrap();

    let mut model = DecoderModel::load_checkpoint(&base).unwrap();
    lora::load_adapters(&mut model, &adapter).unwrap();
    let lib = response_perplexity(
        &model,
        "Repeat 3.",
        "3",
        &PromptFormat::builtin(PromptVersion::V02),
    )
    .unwrap();
    assert!((cli - lib).abs() <= 1e-12 * lib, "{cli} vs {lib}");
}

#[test]
fn greedy_generation_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let (base, adapter) = trained(dir.path());
    let args = [
        "generate",
        "--base",
        s(&base),
        "--adapter",
        s(&adapter),
        "--instruction",
        "Repeat 4.",
        "--temperature",
        "0",
        "--max-new-tokens",
        "8",
    ];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a.stdout, b.stdout);
}
