use instruct_forge::data::{Category, InstructionRecord, PromptFormat, PromptVersion};
use instruct_forge::lora::{self, LoraAdapter, LoraConfig};
use instruct_forge::model::{AttentionLayout, DecoderModel, LanguageModel, ModelConfig};
use instruct_forge::training::{self, TrainConfig};
use instruct_forge::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn base(layout: AttentionLayout) -> DecoderModel {
    DecoderModel::init(ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        max_seq_len: 64,
        attention_layout: layout,
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn targets(layout: AttentionLayout) -> Vec<String> {
    match layout {
        AttentionLayout::SplitQv => vec!["q_proj".into(), "v_proj".into()],
        AttentionLayout::FusedQkv => vec!["query_key_value".into()],
    }
}

fn config(layout: AttentionLayout) -> LoraConfig {
    LoraConfig {
        target_names: targets(layout),
        ..LoraConfig::default()
    }
}

fn random_ids(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let len = rng.random_range(1..=32);
    (0..len).map(|_| rng.random_range(0..259)).collect()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn fresh_adapters_leave_logits_bit_identical() {
    for layout in [AttentionLayout::SplitQv, AttentionLayout::FusedQkv] {
        let plain = base(layout);
        let mut adapted = plain.clone();
        lora::inject(&mut adapted, &config(layout), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let ids = random_ids(&mut rng);
            assert_eq!(
                bits(&plain.logits(&ids).unwrap()),
                bits(&adapted.logits(&ids).unwrap())
            );
        }
    }
}

#[test]
fn target_counts_per_layout() {
    let mut split = base(AttentionLayout::SplitQv);
    assert_eq!(
        lora::inject(&mut split, &config(AttentionLayout::SplitQv), 0).unwrap(),
        4
    );
    let mut fused = base(AttentionLayout::FusedQkv);
    assert_eq!(
        lora::inject(&mut fused, &config(AttentionLayout::FusedQkv), 0).unwrap(),
        2
    );
    assert_eq!(
        lora::trainable_param_count(&base(AttentionLayout::SplitQv)),
        0
    );
    // split: four 32×32 weights at r=4
    assert_eq!(lora::trainable_param_count(&split), 4 * (32 + 32) * 4);
    // fused: two 96×32 weights
    assert_eq!(lora::trainable_param_count(&fused), 2 * (96 + 32) * 4);
}

fn trained(layout: AttentionLayout) -> DecoderModel {
    let mut m = base(layout);
    lora::inject(&mut m, &config(layout), 2).unwrap();
    let records: Vec<InstructionRecord> = (0..16)
        .map(|i| {
            InstructionRecord::new(
                format!("echo {i}"),
                None,
                format!("{i}{i}"),
                Category::Other,
                "t",
            )
            .unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 2,
        train_seq_len: 64,
        ..TrainConfig::default()
    };
    training::train(
        &mut m,
        &records,
        &PromptFormat::builtin(PromptVersion::V02),
        &cfg,
        None,
    )
    .unwrap();
    m
}

#[test]
fn merged_forward_matches_adapted_after_training() {
    for layout in [AttentionLayout::SplitQv, AttentionLayout::FusedQkv] {
        let adapted = trained(layout);
        assert!(adapted
            .adapters()
            .unwrap()
            .iter()
            .any(|a| a.b().data().iter().any(|&x| x != 0.0)));
        let mut merged = adapted.clone();
        lora::merge(&mut merged).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let ids = random_ids(&mut rng);
            let a = adapted.logits(&ids).unwrap();
            let b = merged.logits(&ids).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }
        lora::unmerge(&mut merged).unwrap();
        let ids = random_ids(&mut rng);
        assert_eq!(
            bits(&adapted.logits(&ids).unwrap()),
            bits(&merged.logits(&ids).unwrap())
        );
    }
}

#[test]
fn training_never_touches_base_weights() {
    let before = base(AttentionLayout::SplitQv);
    let after = trained(AttentionLayout::SplitQv);
    for (name, t) in before.named_parameters() {
        assert_eq!(bits(t), bits(after.parameter(name).unwrap()), "{name}");
    }
}

#[test]
fn adapter_file_roundtrip_and_base_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.ckpt");
    let tuned = trained(AttentionLayout::SplitQv);
    lora::save_adapters(&tuned, &path).unwrap();
    let mut fresh = base(AttentionLayout::SplitQv);
    lora::load_adapters(&mut fresh, &path).unwrap();
    let ids = [1u32, 2, 3, 4];
    assert_eq!(
        bits(&tuned.logits(&ids).unwrap()),
        bits(&fresh.logits(&ids).unwrap())
    );

    let mut other = base(AttentionLayout::FusedQkv);
    assert!(lora::load_adapters(&mut other, &path).is_err());
}

#[test]
fn merge_with_zero_b_keeps_weight() {
    let mut m = base(AttentionLayout::SplitQv);
    let w = m
        .parameter("layers.0.self_attn.q_proj.weight")
        .unwrap()
        .clone();
    lora::inject(&mut m, &config(AttentionLayout::SplitQv), 0).unwrap();
    lora::merge(&mut m).unwrap();
    assert_eq!(
        bits(&w),
        bits(m.parameter("layers.0.self_attn.q_proj.weight").unwrap())
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_law(d in 1usize..40, k in 1usize..40, r in 1usize..8, seed in any::<u64>()) {
        prop_assume!(r <= d.min(k));
        let cfg = LoraConfig { r, ..LoraConfig::default() };
        let a = LoraAdapter::new("w", d, k, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.param_count(), (d + k) * r);
        prop_assert_eq!(a.a().shape(), &[r, k]);
        prop_assert_eq!(a.b().shape(), &[d, r]);
        prop_assert!(a.b().data().iter().all(|&x| x == 0.0));
    }
}
