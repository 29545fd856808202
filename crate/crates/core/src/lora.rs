//! Low-rank adapters.
//!
//! A frozen weight `W₀ ∈ ℝ^{d×k}` is augmented with `ΔW = B·A`, where
//! `B ∈ ℝ^{d×r}` starts at zero and `A ∈ ℝ^{r×k}` is drawn from a normal
//! distribution, so an adapted model is exactly the base model until the
//! first update. The delta is scaled by `alpha / r`, and dropout acts only
//! on the adapter's input path.

use std::path::Path;

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, ModelConfig};
use crate::tensor::{archive, Tensor, Var};

const ADAPTER_KIND: &str = "lora-adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_names: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 4,
            alpha: 16.0,
            dropout: 0.05,
            target_names: vec!["q_proj".into(), "v_proj".into()],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Validation("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "LoRA dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Validation(format!(
                "LoRA alpha {} must be positive",
                self.alpha
            )));
        }
        if self.target_names.is_empty() {
            return Err(Error::Validation(
                "LoRA needs at least one target name".into(),
            ));
        }
        Ok(())
    }
}

/// Name under which an adapter's `A` factor is trained and archived.
pub fn a_name(target: &str) -> String {
    format!("{}.lora_A", target.trim_end_matches(".weight"))
}

pub fn b_name(target: &str) -> String {
    format!("{}.lora_B", target.trim_end_matches(".weight"))
}

/// A parameter matches a pattern when its module path (the name without
/// `.weight`) equals the pattern or ends with `.<pattern>`.
pub fn matches_target(param_name: &str, pattern: &str) -> bool {
    let Some(module) = param_name.strip_suffix(".weight") else {
        return false;
    };
    module == pattern || module.ends_with(&format!(".{pattern}"))
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    target: String,
    a: Tensor,
    b: Tensor,
    alpha: f64,
    dropout: f64,
    saved_base: Option<Tensor>,
}

impl LoraAdapter {
    /// Fresh adapter for a `d×k` weight: `A ~ N(0, (1/r)²)`, `B = 0`.
    pub fn new(
        target: &str,
        d: usize,
        k: usize,
        config: &LoraConfig,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        config.validate()?;
        if config.r > d.min(k) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(d, k) = {} for {target}",
                config.r,
                d.min(k)
            )));
        }
        Ok(Self {
            target: target.to_string(),
            a: Tensor::randn(&[config.r, k], 1.0 / config.r as f64, rng),
            b: Tensor::zeros(&[d, config.r]),
            alpha: config.alpha,
            dropout: config.dropout,
            saved_base: None,
        })
    }

    /// Adapter from explicit factors.
    pub fn from_factors(
        target: &str,
        a: Tensor,
        b: Tensor,
        alpha: f64,
        dropout: f64,
    ) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, r2) = b.dims2()?;
        if r != r2 {
            return Err(Error::Shape {
                op: "lora factors",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self {
            target: target.to_string(),
            a,
            b,
            alpha,
            dropout,
            saved_base: None,
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn scaling(&self) -> f32 {
        (self.alpha / self.rank() as f64) as f32
    }

    pub fn is_merged(&self) -> bool {
        self.saved_base.is_some()
    }

    /// `(d + k) · r`
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `(alpha / r) · B·A`
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }

    pub fn merged_weight(&self, w0: &Tensor) -> Result<Tensor> {
        w0.add(&self.delta()?)
    }

    /// Evaluation-mode output `x·W₀ᵀ + (alpha/r)·x·Aᵀ·Bᵀ` on plain tensors.
    pub fn apply(&self, x: &Tensor, w0: &Tensor) -> Result<Tensor> {
        let g = crate::tensor::Graph::new();
        let out = adapted_forward(
            g.constant(x.clone()),
            g.constant(w0.clone()),
            g.constant(self.a.clone()),
            g.constant(self.b.clone()),
            self.scaling(),
            None,
        )?;
        Ok(out.value())
    }
}

/// `x·W₀ᵀ + scaling · dropout(x)·Aᵀ·Bᵀ`. Dropout runs only when a
/// probability and generator are supplied.
pub fn adapted_forward<'g>(
    x: Var<'g>,
    w0: Var<'g>,
    a: Var<'g>,
    b: Var<'g>,
    scaling: f32,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var<'g>> {
    let base = x.matmul_t(w0)?;
    let xd = match dropout {
        Some((p, rng)) => x.dropout(p, rng)?,
        None => x,
    };
    let delta = xd.matmul_t(a)?.matmul_t(b)?.scale(scaling);
    base.add(delta)
}

/// Every adapter attached to a model.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    config: LoraConfig,
    adapters: IndexMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn is_merged(&self) -> bool {
        self.adapters.values().any(LoraAdapter::is_merged)
    }

    pub(crate) fn trainable_tensors(&self) -> Vec<(String, Tensor)> {
        self.adapters
            .values()
            .flat_map(|ad| {
                [
                    (a_name(&ad.target), ad.a.clone()),
                    (b_name(&ad.target), ad.b.clone()),
                ]
            })
            .collect()
    }

    pub(crate) fn set_trainable(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.is_merged() {
            return Err(Error::State(
                "adapters are merged; unmerge before updating".into(),
            ));
        }
        for ad in self.adapters.values_mut() {
            let slot = if name == a_name(&ad.target) {
                &mut ad.a
            } else if name == b_name(&ad.target) {
                &mut ad.b
            } else {
                continue;
            };
            if slot.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "adapter update",
                    lhs: slot.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            *slot = value;
            return Ok(());
        }
        Err(Error::Config(format!("no adapter parameter named {name}")))
    }
}

/// Names of weights applied as linear projections (embedding excluded).
fn linear_weights(model: &DecoderModel) -> Vec<(String, usize, usize)> {
    let embed = model.named_parameters().keys().next().cloned();
    model
        .named_parameters()
        .iter()
        .filter(|(name, t)| t.shape().len() == 2 && Some(*name) != embed.as_ref())
        .map(|(name, t)| (name.clone(), t.shape()[0], t.shape()[1]))
        .collect()
}

/// Attaches adapters to every linear weight matched by the config's
/// target names and freezes all base weights. Returns the adapter count.
pub fn inject(model: &mut DecoderModel, config: &LoraConfig, seed: u64) -> Result<usize> {
    config.validate()?;
    if model.adapters.is_some() {
        return Err(Error::State("model already has adapters".into()));
    }
    let weights = linear_weights(model);
    let unmatched: Vec<&str> = config
        .target_names
        .iter()
        .filter(|pat| !weights.iter().any(|(n, _, _)| matches_target(n, pat)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Config(format!(
            "LoRA target pattern(s) matched no parameter: {}",
            unmatched.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = IndexMap::new();
    for (name, d, k) in weights {
        if config.target_names.iter().any(|p| matches_target(&name, p)) {
            let ad = LoraAdapter::new(&name, d, k, config, &mut rng)?;
            adapters.insert(name, ad);
        }
    }
    let n = adapters.len();
    model.adapters = Some(AdapterSet {
        config: config.clone(),
        adapters,
    });
    model.set_base_frozen(true);
    Ok(n)
}

/// Folds every adapter into its base weight. The pre-merge weights are
/// kept so [`unmerge`] restores them bit for bit.
pub fn merge(model: &mut DecoderModel) -> Result<()> {
    let Some(set) = model.adapters.take() else {
        return Err(Error::State("model has no adapters to merge".into()));
    };
    if set.is_merged() {
        model.adapters = Some(set);
        return Err(Error::State("adapters are already merged".into()));
    }
    let mut set = set;
    let result = (|| {
        for ad in set.adapters.values_mut() {
            let w0 = model.named_parameters()[&ad.target].clone();
            let merged = ad.merged_weight(&w0)?;
            model.params_mut()[&ad.target] = merged;
            ad.saved_base = Some(w0);
        }
        Ok(())
    })();
    model.adapters = Some(set);
    result
}

pub fn unmerge(model: &mut DecoderModel) -> Result<()> {
    let Some(mut set) = model.adapters.take() else {
        return Err(Error::State("model has no adapters to unmerge".into()));
    };
    if !set.is_merged() {
        model.adapters = Some(set);
        return Err(Error::State("adapters are not merged".into()));
    }
    for ad in set.adapters.values_mut() {
        if let Some(w0) = ad.saved_base.take() {
            model.params_mut()[&ad.target] = w0;
        }
    }
    model.adapters = Some(set);
    Ok(())
}

/// `Σ (d + k) · r` over attached adapters.
pub fn trainable_param_count(model: &DecoderModel) -> usize {
    model
        .adapters()
        .map_or(0, |set| set.iter().map(LoraAdapter::param_count).sum())
}

/// Writes only the adapter factors plus the LoRA config.
pub fn save_adapters(model: &DecoderModel, path: &Path) -> Result<()> {
    let set = model
        .adapters()
        .ok_or_else(|| Error::State("model has no adapters to save".into()))?;
    let tensors: IndexMap<String, Tensor> = set.trainable_tensors().into_iter().collect();
    let meta = serde_json::json!({
        "kind": ADAPTER_KIND,
        "lora": set.config,
        "targets": set.adapters.keys().collect::<Vec<_>>(),
        "base_config": model.config(),
    });
    archive::save(path, &tensors, meta)
}

/// Attaches adapters from an adapter checkpoint onto a matching base model.
pub fn load_adapters(model: &mut DecoderModel, path: &Path) -> Result<()> {
    let (tensors, meta) = archive::load::<f32>(path)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(ADAPTER_KIND) {
        return Err(Error::Integrity(format!(
            "{} is not an adapter checkpoint",
            path.display()
        )));
    }
    let config: LoraConfig = serde_json::from_value(meta["lora"].clone())
        .map_err(|e| Error::Integrity(format!("adapter config unreadable: {e}")))?;
    let base: ModelConfig = serde_json::from_value(meta["base_config"].clone())
        .map_err(|e| Error::Integrity(format!("adapter base config unreadable: {e}")))?;
    let mine = model.config();
    if base.attention_layout != mine.attention_layout
        || base.d_model != mine.d_model
        || base.n_layers != mine.n_layers
        || base.vocab_size != mine.vocab_size
    {
        return Err(Error::Integrity(
            "adapter checkpoint was trained for a different base architecture".into(),
        ));
    }
    let targets: Vec<String> = serde_json::from_value(meta["targets"].clone())
        .map_err(|e| Error::Integrity(format!("adapter target list unreadable: {e}")))?;
    if model.adapters.is_some() {
        return Err(Error::State("model already has adapters".into()));
    }
    let mut adapters = IndexMap::new();
    for target in targets {
        let w = model
            .parameter(&target)
            .ok_or_else(|| Error::Integrity(format!("base model has no weight {target}")))?;
        let (d, k) = w.dims2()?;
        let a = tensors
            .get(&a_name(&target))
            .ok_or_else(|| Error::Integrity(format!("missing {}", a_name(&target))))?;
        let b = tensors
            .get(&b_name(&target))
            .ok_or_else(|| Error::Integrity(format!("missing {}", b_name(&target))))?;
        if a.shape() != [config.r, k] || b.shape() != [d, config.r] {
            return Err(Error::Integrity(format!(
                "adapter factors for {target} have the wrong shape"
            )));
        }
        let ad =
            LoraAdapter::from_factors(&target, a.clone(), b.clone(), config.alpha, config.dropout)?;
        adapters.insert(target, ad);
    }
    model.adapters = Some(AdapterSet { config, adapters });
    model.set_base_frozen(true);
    Ok(())
}
