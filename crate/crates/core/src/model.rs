//! Small pre-norm decoder-only transformer with rotary positions.
//!
//! Two attention layouts are supported and determine parameter names:
//! `fused-qkv` stores one `query_key_value` projection per layer, while
//! `split-qv` stores separate `q_proj`, `k_proj`, `v_proj` and `o_proj`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet};
use crate::tensor::{archive, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const CHECKPOINT_KIND: &str = "decoder-model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionLayout {
    FusedQkv,
    SplitQv,
}

impl fmt::Display for AttentionLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionLayout::FusedQkv => "fused-qkv",
            AttentionLayout::SplitQv => "split-qv",
        })
    }
}

impl FromStr for AttentionLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused-qkv" => Ok(AttentionLayout::FusedQkv),
            "split-qv" => Ok(AttentionLayout::SplitQv),
            _ => Err(Error::Validation(format!(
                "unknown attention layout {s:?} (expected fused-qkv or split-qv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub attention_layout: AttentionLayout,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            max_seq_len: 512,
            attention_layout: AttentionLayout::SplitQv,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 {
            return bad("vocab_size, d_model and n_layers must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head dimension {} must be even for rotary positions",
                self.head_dim()
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Expected `(name, shape)` of every base parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, f) = (self.d_model, self.vocab_size, self.d_ff());
        let n = LayerNames::new(self.attention_layout);
        let mut out = vec![(n.embed.to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("input_layernorm.weight"), vec![d]));
            out.push((p("input_layernorm.bias"), vec![d]));
            match self.attention_layout {
                AttentionLayout::FusedQkv => {
                    out.push((p("attention.query_key_value.weight"), vec![3 * d, d]))
                }
                AttentionLayout::SplitQv => {
                    for proj in ["q_proj", "k_proj", "v_proj"] {
                        out.push((p(&format!("self_attn.{proj}.weight")), vec![d, d]));
                    }
                }
            }
            out.push((p(&format!("{}.weight", n.attn_out)), vec![d, d]));
            out.push((p("post_attention_layernorm.weight"), vec![d]));
            out.push((p("post_attention_layernorm.bias"), vec![d]));
            out.push((p(&format!("{}.weight", n.ff_up)), vec![f, d]));
            out.push((p(&format!("{}.bias", n.ff_up)), vec![f]));
            out.push((p(&format!("{}.weight", n.ff_down)), vec![d, f]));
            out.push((p(&format!("{}.bias", n.ff_down)), vec![d]));
        }
        out.push((format!("{}.weight", n.final_norm), vec![d]));
        out.push((format!("{}.bias", n.final_norm), vec![d]));
        out.push((n.head.to_string(), vec![v, d]));
        out
    }
}

/// Layout-dependent parameter name fragments.
struct LayerNames {
    embed: &'static str,
    attn_out: &'static str,
    ff_up: &'static str,
    ff_down: &'static str,
    final_norm: &'static str,
    head: &'static str,
}

impl LayerNames {
    fn new(layout: AttentionLayout) -> Self {
        match layout {
            AttentionLayout::FusedQkv => Self {
                embed: "embed_in.weight",
                attn_out: "attention.dense",
                ff_up: "mlp.dense_h_to_4h",
                ff_down: "mlp.dense_4h_to_h",
                final_norm: "final_layer_norm",
                head: "embed_out.weight",
            },
            AttentionLayout::SplitQv => Self {
                embed: "embed_tokens.weight",
                attn_out: "self_attn.o_proj",
                ff_up: "mlp.up_proj",
                ff_down: "mlp.down_proj",
                final_norm: "norm",
                head: "lm_head.weight",
            },
        }
    }
}

/// Anything that maps a token prefix to next-token logits.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// Logits `[T×V]` for a single sequence in evaluation mode.
    fn logits(&self, ids: &[u32]) -> Result<Tensor>;
}

pub enum Mode<'r> {
    Eval,
    /// Gradients are tracked for trainable parameters and adapter dropout is live.
    Train(&'r mut dyn RngCore),
}

pub struct Forward<'g> {
    pub logits: Var<'g>,
    /// Trainable parameters touched by this pass, by name.
    pub trainable: Vec<(String, Var<'g>)>,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    base_frozen: bool,
    pub(crate) adapters: Option<AdapterSet>,
}

impl DecoderModel {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let names = LayerNames::new(config.attention_layout);
        let mut params = IndexMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with("layernorm.weight")
                || name == format!("{}.weight", names.final_norm)
            {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.contains(names.attn_out) || name.contains(names.ff_down) {
                Tensor::randn(&shape, residual_std, &mut rng)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            params,
            base_frozen: false,
            adapters: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Base parameters in stable, layout-dependent order.
    pub fn named_parameters(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut AdapterSet> {
        self.adapters.as_mut()
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub(crate) fn set_base_frozen(&mut self, frozen: bool) {
        self.base_frozen = frozen;
    }

    pub(crate) fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    /// Replaces a base parameter value, keeping its shape.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_parameter",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Parameters the optimizer may update: adapter factors when adapters
    /// are attached, otherwise every base weight unless frozen.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        match &self.adapters {
            Some(set) => set.trainable_tensors(),
            None if !self.base_frozen => self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Writes an updated trainable tensor back, by the name used in
    /// [`DecoderModel::trainable_parameters`].
    pub fn update_trainable(&mut self, name: &str, value: Tensor) -> Result<()> {
        match &mut self.adapters {
            Some(set) => set.set_trainable(name, value),
            None if !self.base_frozen => self.set_parameter(name, value),
            None => Err(Error::State(format!("parameter {name} is frozen"))),
        }
    }

    /// Records a forward pass over `ids`, which hold whole sequences of
    /// `seq_len` tokens laid end to end.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ids: &[u32],
        seq_len: usize,
        mode: Mode<'_>,
    ) -> Result<Forward<'g>> {
        if seq_len == 0 || ids.is_empty() || !ids.len().is_multiple_of(seq_len) {
            return Err(Error::Contract(format!(
                "{} token ids do not split into sequences of {seq_len}",
                ids.len()
            )));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                len: seq_len,
                max: self.config.max_seq_len,
            });
        }
        let mut ctx = Ctx {
            g,
            model: self,
            rng: match mode {
                Mode::Eval => None,
                Mode::Train(rng) => Some(rng),
            },
            trainable: Vec::new(),
        };
        let cfg = &self.config;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let names = LayerNames::new(cfg.attention_layout);

        let mut x = ctx.weight(names.embed)?.embedding(ids)?;
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let a = ctx.norm(x, &p("input_layernorm"))?;
            let (q, k, v) = match cfg.attention_layout {
                AttentionLayout::FusedQkv => {
                    let qkv = ctx.linear(a, &p("attention.query_key_value.weight"))?;
                    (
                        qkv.slice_cols(0, d)?,
                        qkv.slice_cols(d, d)?,
                        qkv.slice_cols(2 * d, d)?,
                    )
                }
                AttentionLayout::SplitQv => (
                    ctx.linear(a, &p("self_attn.q_proj.weight"))?,
                    ctx.linear(a, &p("self_attn.k_proj.weight"))?,
                    ctx.linear(a, &p("self_attn.v_proj.weight"))?,
                ),
            };
            let q = q.rope(h, seq_len)?;
            let k = k.rope(h, seq_len)?;
            let attn = q.causal_attention(k, v, h, seq_len)?;
            x = x.add(ctx.linear(attn, &p(&format!("{}.weight", names.attn_out)))?)?;

            let m = ctx.norm(x, &p("post_attention_layernorm"))?;
            let up = ctx.linear(m, &p(&format!("{}.weight", names.ff_up)))?;
            let up = up
                .add(ctx.weight(&p(&format!("{}.bias", names.ff_up)))?)?
                .gelu();
            let down = ctx.linear(up, &p(&format!("{}.weight", names.ff_down)))?;
            let down = down.add(ctx.weight(&p(&format!("{}.bias", names.ff_down)))?)?;
            x = x.add(down)?;
        }
        let x = ctx.norm(x, names.final_norm)?;
        let logits = ctx.linear(x, names.head)?;
        Ok(Forward {
            logits,
            trainable: ctx.trainable,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "layout": self.config.attention_layout,
            "config": self.config,
        });
        archive::save(path, &self.params, meta)
    }

    /// Loads a checkpoint, verifying every tensor against the embedded config.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (tensors, meta) = archive::load::<f32>(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Integrity(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Integrity(format!("checkpoint config unreadable: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::Integrity(format!("checkpoint config invalid: {e}")))?;
        let layout: AttentionLayout = serde_json::from_value(meta["layout"].clone())
            .map_err(|e| Error::Integrity(format!("checkpoint layout tag unreadable: {e}")))?;
        if layout != config.attention_layout {
            return Err(Error::Integrity(
                "layout tag disagrees with embedded config".into(),
            ));
        }
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, config implies {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Integrity(format!(
                        "tensor {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::Integrity(format!(
                        "tensor {name} missing from checkpoint"
                    )))
                }
            }
        }
        let params = expected
            .into_iter()
            .map(|(name, _)| {
                let t = tensors[&name].clone();
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params,
            base_frozen: false,
            adapters: None,
        })
    }

    /// Loads a checkpoint and insists it was produced for `expected`.
    pub fn load_checkpoint_as(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        if model.config.attention_layout != expected.attention_layout {
            return Err(Error::Integrity(format!(
                "checkpoint layout {} does not match requested {}",
                model.config.attention_layout, expected.attention_layout
            )));
        }
        if model.config != *expected {
            return Err(Error::Integrity(format!(
                "checkpoint config {:?} does not match requested {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }
}

impl LanguageModel for DecoderModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.forward(&g, ids, ids.len(), Mode::Eval)?.logits.value())
    }
}

struct Ctx<'g, 'm, 'r> {
    g: &'g Graph,
    model: &'m DecoderModel,
    rng: Option<&'r mut dyn RngCore>,
    trainable: Vec<(String, Var<'g>)>,
}

impl<'g> Ctx<'g, '_, '_> {
    fn base_trainable(&self) -> bool {
        self.rng.is_some() && !self.model.base_frozen && self.model.adapters.is_none()
    }

    fn weight(&mut self, name: &str) -> Result<Var<'g>> {
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?
            .clone();
        Ok(if self.base_trainable() {
            let v = self.g.param(t);
            self.trainable.push((name.to_string(), v));
            v
        } else {
            self.g.constant(t)
        })
    }

    fn norm(&mut self, x: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        let gain = self.weight(&format!("{prefix}.weight"))?;
        let bias = self.weight(&format!("{prefix}.bias"))?;
        x.layer_norm(gain, bias, LN_EPS)
    }

    /// `x · Wᵀ`, routed through the adapter when one targets `name`.
    fn linear(&mut self, x: Var<'g>, name: &str) -> Result<Var<'g>> {
        let w = self.weight(name)?;
        let adapter = self
            .model
            .adapters
            .as_ref()
            .filter(|set| !set.is_merged())
            .and_then(|set| set.get(name));
        let Some(adapter) = adapter else {
            return x.matmul_t(w);
        };
        let training = self.rng.is_some();
        let (a, b) = if training {
            let a = self.g.param(adapter.a().clone());
            let b = self.g.param(adapter.b().clone());
            self.trainable.push((lora::a_name(name), a));
            self.trainable.push((lora::b_name(name), b));
            (a, b)
        } else {
            (
                self.g.constant(adapter.a().clone()),
                self.g.constant(adapter.b().clone()),
            )
        };
        let dropout = self
            .rng
            .as_mut()
            .map(|rng| (adapter.dropout(), &mut **rng as &mut dyn RngCore));
        lora::adapted_forward(x, w, a, b, adapter.scaling(), dropout)
    }
}
