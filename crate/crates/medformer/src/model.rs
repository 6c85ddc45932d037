//! The three-stage model: an input adaptformer standardizes raw 2-D or 3-D
//! samples into canonical tokens under dimensionality / modality / body-part
//! latents, a task-agnostic main body refines them, and an output
//! adaptformer specializes them under a task latent before a per-task head.
//!
//! Latents live in `latent_dim` and are lifted to `hidden_dim` by one shared
//! linear map per category position. Task-type losses and the label/decode
//! conventions for the four task kinds live here too.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{BlockConfig, Linear, TransformerBlock};
use crate::config::{ConfigError, Value};
use crate::latents::{LatentBank, LatentCategory, LatentsConfig, LatentsError};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenizer::{patchify2d, patchify3d, pos_embed};

/// Model-level errors (construction, routing, labels).
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Latents(#[from] LatentsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown task '{name}' (known: {known})")]
    UnknownTask { name: String, known: String },
    #[error("task '{task}': expected input shape {expected:?}, got {got:?}")]
    InputShape {
        task: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("task '{name}': {msg}")]
    Task { name: String, msg: String },
    #[error("label error: {msg}")]
    Label { msg: String },
}

fn label_err(msg: impl Into<String>) -> ModelError {
    ModelError::Label { msg: msg.into() }
}

/// Whether a task consumes flat images or volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

impl Dimensionality {
    pub fn label(self) -> &'static str {
        match self {
            Dimensionality::D2 => "2d",
            Dimensionality::D3 => "3d",
        }
    }

    /// Expected sample rank including the channel axis.
    pub fn rank(self) -> usize {
        match self {
            Dimensionality::D2 => 3, // [C, H, W]
            Dimensionality::D3 => 4, // [C, D, H, W]
        }
    }
}

/// The four supported label structures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "classes", rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel(usize),
    Binary,
    MultiLabel(usize),
    Ordinal(usize),
}

impl TaskKind {
    /// Width of the task head's logit vector.
    pub fn out_dim(self) -> usize {
        match self {
            TaskKind::SingleLabel(k) | TaskKind::MultiLabel(k) => k,
            TaskKind::Binary | TaskKind::Ordinal(_) => 1,
        }
    }

    /// Length of the canonical label vector (see [`canonical_label`]).
    pub fn label_len(self) -> usize {
        match self {
            TaskKind::SingleLabel(k) | TaskKind::MultiLabel(k) => k,
            TaskKind::Binary | TaskKind::Ordinal(_) => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SingleLabel(_) => "single_label",
            TaskKind::Binary => "binary",
            TaskKind::MultiLabel(_) => "multi_label",
            TaskKind::Ordinal(_) => "ordinal",
        }
    }

    pub fn validate(self) -> Result<(), ModelError> {
        match self {
            TaskKind::SingleLabel(k) | TaskKind::MultiLabel(k) | TaskKind::Ordinal(k)
                if k < 2 =>
            {
                Err(label_err(format!(
                    "{} task needs at least 2 classes, got {k}",
                    self.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Everything the model needs to route one task: its input geometry, label
/// structure, and which latent it selects from each category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub dimensionality: Dimensionality,
    pub kind: TaskKind,
    /// `[C, H, W]` for 2-D tasks, `[C, D, H, W]` for 3-D tasks.
    pub input_shape: Vec<usize>,
    pub dimension_latent: String,
    pub modality_latent: String,
    pub body_part_latent: String,
    pub task_latent: String,
}

impl TaskSpec {
    /// Build a spec with the conventional latent wiring: the dimension
    /// latent follows `dimensionality` (`2d_latent`/`3d_latent`) and the
    /// task latent is named after the task.
    pub fn new(
        name: impl Into<String>,
        dimensionality: Dimensionality,
        kind: TaskKind,
        input_shape: Vec<usize>,
        modality_latent: impl Into<String>,
        body_part_latent: impl Into<String>,
    ) -> Self {
        let name = name.into();
        TaskSpec {
            dimension_latent: format!("{}_latent", dimensionality.label()),
            modality_latent: modality_latent.into(),
            body_part_latent: body_part_latent.into(),
            task_latent: name.clone(),
            name,
            dimensionality,
            kind,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| {
            Err(ModelError::Task {
                name: self.name.clone(),
                msg,
            })
        };
        if self.name.is_empty() {
            return fail("empty task name".into());
        }
        self.kind.validate()?;
        if self.input_shape.len() != self.dimensionality.rank() {
            return fail(format!(
                "{} task expects a rank-{} input shape (with channels), got {:?}",
                self.dimensionality.label(),
                self.dimensionality.rank(),
                self.input_shape
            ));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return fail(format!("input shape {:?} has a zero axis", self.input_shape));
        }
        Ok(())
    }

    /// Check that every referenced latent exists in the vocabulary.
    pub fn resolve(&self, cfg: &LatentsConfig) -> Result<(), ModelError> {
        let checks = [
            (LatentCategory::Dimension, &self.dimension_latent),
            (LatentCategory::Modality, &self.modality_latent),
            (LatentCategory::BodyPart, &self.body_part_latent),
            (LatentCategory::Task, &self.task_latent),
        ];
        for (cat, name) in checks {
            if !cfg.names(cat).iter().any(|n| n == name) {
                return Err(ModelError::Task {
                    name: self.name.clone(),
                    msg: format!(
                        "{} latent '{name}' is not in the vocabulary (known: {})",
                        cat.label(),
                        cfg.names(cat).join(", ")
                    ),
                });
            }
        }
        Ok(())
    }

    /// Key for the shared token projection this task uses.
    fn proj_key(&self) -> String {
        format!("{}_c{}", self.dimensionality.label(), self.input_shape[0])
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub main_layers: usize,
    pub adapt_in_layers: usize,
    pub adapt_out_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub expander_widths: Vec<usize>,
    /// Accepted for config compatibility; must be 0.
    pub dropout: f64,
}

impl ModelConfig {
    /// The 28×28 / 28³ reference configuration.
    pub fn small() -> Self {
        ModelConfig {
            hidden_dim: 128,
            main_layers: 4,
            adapt_in_layers: 2,
            adapt_out_layers: 2,
            num_heads: 4,
            mlp_ratio: 2,
            patch_size: 4,
            latent_tokens: 32,
            latent_dim: 64,
            expander_widths: vec![1024; 3],
            dropout: 0.0,
        }
    }

    /// The 224×224 / 64³ configuration.
    pub fn large() -> Self {
        ModelConfig {
            hidden_dim: 512,
            main_layers: 6,
            adapt_in_layers: 2,
            adapt_out_layers: 2,
            num_heads: 8,
            mlp_ratio: 4,
            patch_size: 16,
            latent_tokens: 512,
            latent_dim: 256,
            expander_widths: vec![8192; 3],
            dropout: 0.0,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.block().validate("model")?;
        // Positional embeddings need sin/cos pairs per grid axis (up to 3).
        if self.hidden_dim % 2 != 0 || self.hidden_dim < 6 {
            return Err(ConfigError::schema(
                "model.hidden_dim",
                "must be even and at least 6 to host positional encodings",
            ));
        }
        for (field, v) in [
            ("model.main_layers", self.main_layers),
            ("model.adapt_in_layers", self.adapt_in_layers),
            ("model.adapt_out_layers", self.adapt_out_layers),
            ("model.patch_size", self.patch_size),
            ("model.latent_tokens", self.latent_tokens),
            ("model.latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(ConfigError::schema(field, "must be at least 1"));
            }
        }
        if self.expander_widths.is_empty() || self.expander_widths.contains(&0) {
            return Err(ConfigError::schema(
                "model.expander_widths",
                "need at least one positive width",
            ));
        }
        Ok(())
    }

    /// Read from a config block: an optional `preset: small|large` base with
    /// per-field overrides. Unknown keys are rejected.
    pub fn from_value(v: &Value, path: &str) -> Result<Self, ConfigError> {
        let mut cfg = match v.get("preset").map(|p| p.expect_str(&format!("{path}.preset"))) {
            None => ModelConfig::small(),
            Some(p) => match p? {
                "small" => ModelConfig::small(),
                "large" => ModelConfig::large(),
                other => {
                    return Err(ConfigError::schema(
                        format!("{path}.preset"),
                        format!("expected small or large, got '{other}'"),
                    ))
                }
            },
        };
        for (key, val) in v.expect_map(path)? {
            let p = format!("{path}.{key}");
            match key.as_str() {
                "preset" => {}
                "hidden_dim" => cfg.hidden_dim = val.expect_parsed(&p)?,
                "main_layers" => cfg.main_layers = val.expect_parsed(&p)?,
                "adapt_in_layers" => cfg.adapt_in_layers = val.expect_parsed(&p)?,
                "adapt_out_layers" => cfg.adapt_out_layers = val.expect_parsed(&p)?,
                "num_heads" => cfg.num_heads = val.expect_parsed(&p)?,
                "mlp_ratio" => cfg.mlp_ratio = val.expect_parsed(&p)?,
                "patch_size" => cfg.patch_size = val.expect_parsed(&p)?,
                "latent_tokens" => cfg.latent_tokens = val.expect_parsed(&p)?,
                "latent_dim" => cfg.latent_dim = val.expect_parsed(&p)?,
                "dropout" => cfg.dropout = val.expect_parsed(&p)?,
                "expander_widths" => {
                    cfg.expander_widths = val
                        .expect_seq(&p)?
                        .iter()
                        .map(|w| w.expect_parsed(&p))
                        .collect::<Result<_, _>>()?;
                }
                other => {
                    return Err(ConfigError::schema(p, format!("unknown model key '{other}'")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The assembled model: latent bank, shared token projections, the three
/// block stacks, per-category latent lifts, and per-task heads.
pub struct Medformer<T: Scalar> {
    config: ModelConfig,
    bank: LatentBank<T>,
    tasks: IndexMap<String, TaskSpec>,
    input_projs: IndexMap<String, Linear<T>>,
    latproj: Vec<Linear<T>>, // by LatentCategory::ALL order
    input_blocks: Vec<TransformerBlock<T>>,
    main_blocks: Vec<TransformerBlock<T>>,
    output_blocks: Vec<TransformerBlock<T>>,
    heads: IndexMap<String, Linear<T>>,
}

impl<T: Scalar> Medformer<T> {
    pub fn new(
        config: &ModelConfig,
        latents: &LatentsConfig,
        tasks: &[TaskSpec],
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut task_map = IndexMap::new();
        for spec in tasks {
            spec.validate()?;
            spec.resolve(latents)?;
            if task_map.insert(spec.name.clone(), spec.clone()).is_some() {
                return Err(ModelError::Task {
                    name: spec.name.clone(),
                    msg: "duplicate task name".into(),
                });
            }
        }
        let bank = LatentBank::init(latents, config.latent_tokens, config.latent_dim, rng);
        let latproj = LatentCategory::ALL
            .iter()
            .map(|_| Linear::new(config.latent_dim, config.hidden_dim, rng))
            .collect();
        let mut input_projs = IndexMap::new();
        for spec in task_map.values() {
            let width = spec.input_shape[0]
                * config.patch_size.pow(spec.dimensionality.rank() as u32 - 1);
            input_projs
                .entry(spec.proj_key())
                .or_insert_with(|| Linear::new(width, config.hidden_dim, rng));
        }
        let blocks = |n: usize, cross: bool, rng: &mut _| -> Result<Vec<_>, ModelError> {
            (0..n)
                .map(|_| Ok(TransformerBlock::new(&config.block(), cross, rng)?))
                .collect()
        };
        let input_blocks = blocks(config.adapt_in_layers, true, rng)?;
        let main_blocks = blocks(config.main_layers, false, rng)?;
        let output_blocks = blocks(config.adapt_out_layers, true, rng)?;
        let mut heads = IndexMap::new();
        for spec in task_map.values() {
            heads.insert(
                spec.name.clone(),
                Linear::new(config.hidden_dim, spec.kind.out_dim(), rng),
            );
        }
        Ok(Medformer {
            config: config.clone(),
            bank,
            tasks: task_map,
            input_projs,
            latproj,
            input_blocks,
            main_blocks,
            output_blocks,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bank(&self) -> &LatentBank<T> {
        &self.bank
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec, ModelError> {
        self.tasks.get(name).ok_or_else(|| ModelError::UnknownTask {
            name: name.to_string(),
            known: self.tasks.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    fn lift(&self, cat: LatentCategory, name: &str) -> Result<Tensor<T>, ModelError> {
        let idx = LatentCategory::ALL.iter().position(|c| *c == cat).unwrap();
        Ok(self.latproj[idx].forward(self.bank.get(cat, name)?)?)
    }

    /// The input-side conditioning block in hidden space:
    /// `[3·latent_tokens, hidden_dim]`.
    fn input_context(&self, spec: &TaskSpec) -> Result<Tensor<T>, ModelError> {
        let parts = [
            self.lift(LatentCategory::Dimension, &spec.dimension_latent)?,
            self.lift(LatentCategory::Modality, &spec.modality_latent)?,
            self.lift(LatentCategory::BodyPart, &spec.body_part_latent)?,
        ];
        Ok(Tensor::concat(0, &parts)?)
    }

    /// Patchify, project to hidden width, and add positional encodings —
    /// the token embedding the input adaptformer starts from (and equals
    /// exactly at initialization, when its residual blocks are identity).
    pub fn embed_tokens(&self, x: &Tensor<T>, task: &str) -> Result<Tensor<T>, ModelError> {
        let spec = self.task(task)?;
        if x.shape() != spec.input_shape {
            return Err(ModelError::InputShape {
                task: spec.name.clone(),
                expected: spec.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        let (tokens, grid) = match spec.dimensionality {
            Dimensionality::D2 => patchify2d(x, self.config.patch_size)?,
            Dimensionality::D3 => patchify3d(x, self.config.patch_size)?,
        };
        let proj = self.input_projs[&spec.proj_key()].forward(&tokens)?;
        Ok(pos_embed(&proj, &grid)?)
    }

    /// Stage 1: raw sample → canonical `[n, hidden_dim]` tokens under the
    /// task's dimensionality/modality/body-part latents.
    pub fn input_adaptformer(&self, x: &Tensor<T>, task: &str) -> Result<Tensor<T>, ModelError> {
        let ctx = self.input_context(self.task(task)?)?;
        let mut h = self.embed_tokens(x, task)?;
        for block in &self.input_blocks {
            h = block.forward(&h, Some(&ctx))?;
        }
        Ok(h)
    }

    /// Stage 2: the task-agnostic trunk; shape-preserving.
    pub fn main_body(&self, tokens: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut h = tokens.clone();
        for block in &self.main_blocks {
            h = block.forward(&h, None)?;
        }
        Ok(h)
    }

    /// Stage 3: specialize under the task latent, mean-pool over tokens,
    /// and apply the task's head. Returns `[1, out_dim]` logits.
    pub fn output_adaptformer(&self, h: &Tensor<T>, task: &str) -> Result<Tensor<T>, ModelError> {
        let spec = self.task(task)?;
        let ctx = self.lift(LatentCategory::Task, &spec.task_latent)?;
        let mut h = h.clone();
        for block in &self.output_blocks {
            h = block.forward(&h, Some(&ctx))?;
        }
        let pooled = h.transpose()?.mean_axis(1)?.transpose()?; // [1, d]
        Ok(self.heads[&spec.name].forward(&pooled)?)
    }

    /// Full forward pass: `[1, out_dim]` logits for one sample.
    pub fn forward(&self, x: &Tensor<T>, task: &str) -> Result<Tensor<T>, ModelError> {
        let tokens = self.input_adaptformer(x, task)?;
        let h = self.main_body(&tokens)?;
        self.output_adaptformer(&h, task)
    }

    /// The self-supervised path: input adaptformer + main body, mean-pooled
    /// to `[1, hidden_dim]`; no task latent or head involved.
    pub fn trunk_forward(&self, x: &Tensor<T>, task: &str) -> Result<Tensor<T>, ModelError> {
        let h = self.main_body(&self.input_adaptformer(x, task)?)?;
        Ok(h.transpose()?.mean_axis(1)?.transpose()?)
    }

    /// All trainable parameters with stable names, in a deterministic order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (key, p) in &self.input_projs {
            out.extend(p.named_params(&format!("input.proj.{key}")));
        }
        out.extend(self.bank.named_params());
        for (cat, p) in LatentCategory::ALL.iter().zip(&self.latproj) {
            out.extend(p.named_params(&format!("latproj.{}", cat.label())));
        }
        for (i, b) in self.input_blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("input.block{i}")));
        }
        for (i, b) in self.main_blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("main.block{i}")));
        }
        for (i, b) in self.output_blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("output.block{i}")));
        }
        for (name, h) in &self.heads {
            out.extend(h.named_params(&format!("head.{name}")));
        }
        out
    }

    /// Ordered layer partition for layer-sequential (backforward) training:
    /// the embedding stage (token projections, latents, latent lifts), each
    /// block in forward order, then the heads.
    pub fn param_groups(&self) -> Vec<(String, Vec<(String, Tensor<T>)>)> {
        let mut groups = Vec::new();
        let mut embed = Vec::new();
        for (key, p) in &self.input_projs {
            embed.extend(p.named_params(&format!("input.proj.{key}")));
        }
        embed.extend(self.bank.named_params());
        for (cat, p) in LatentCategory::ALL.iter().zip(&self.latproj) {
            embed.extend(p.named_params(&format!("latproj.{}", cat.label())));
        }
        groups.push(("embed".to_string(), embed));
        for (i, b) in self.input_blocks.iter().enumerate() {
            let name = format!("input.block{i}");
            groups.push((name.clone(), b.named_params(&name)));
        }
        for (i, b) in self.main_blocks.iter().enumerate() {
            let name = format!("main.block{i}");
            groups.push((name.clone(), b.named_params(&name)));
        }
        for (i, b) in self.output_blocks.iter().enumerate() {
            let name = format!("output.block{i}");
            groups.push((name.clone(), b.named_params(&name)));
        }
        let mut heads = Vec::new();
        for (name, h) in &self.heads {
            heads.extend(h.named_params(&format!("head.{name}")));
        }
        groups.push(("heads".to_string(), heads));
        groups
    }
}

/// One-hot vector for a hard class label.
pub fn one_hot(class: usize, k: usize) -> Result<Vec<f64>, ModelError> {
    if class >= k {
        return Err(label_err(format!(
            "class index {class} out of range for {k} classes"
        )));
    }
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    Ok(v)
}

/// Convert a raw integer label row to the canonical soft-label vector:
/// one-hot for single-label, `[y]` for binary, the multi-hot row itself for
/// multi-label, `[rank]` for ordinal.
pub fn canonical_label(kind: TaskKind, raw: &[i64]) -> Result<Vec<f64>, ModelError> {
    let class = |k: usize| -> Result<usize, ModelError> {
        match raw {
            [c] if *c >= 0 && (*c as usize) < k => Ok(*c as usize),
            [c] => Err(label_err(format!("class index {c} out of range for {k} classes"))),
            _ => Err(label_err(format!("expected one class index, got {} values", raw.len()))),
        }
    };
    match kind {
        TaskKind::SingleLabel(k) => one_hot(class(k)?, k),
        TaskKind::Binary => Ok(vec![class(2)? as f64]),
        TaskKind::Ordinal(k) => Ok(vec![class(k)? as f64]),
        TaskKind::MultiLabel(k) => {
            if raw.len() != k {
                return Err(label_err(format!(
                    "multi-label row has {} entries, expected {k}",
                    raw.len()
                )));
            }
            raw.iter()
                .map(|&v| match v {
                    0 => Ok(0.0),
                    1 => Ok(1.0),
                    other => Err(label_err(format!("multi-hot entry {other} is not 0/1"))),
                })
                .collect()
        }
    }
}

fn check_label(kind: TaskKind, target: &[f64]) -> Result<(), ModelError> {
    if target.len() != kind.label_len() {
        return Err(label_err(format!(
            "{} target has {} entries, expected {}",
            kind.name(),
            target.len(),
            kind.label_len()
        )));
    }
    let max = match kind {
        TaskKind::Ordinal(k) => (k - 1) as f64,
        _ => 1.0,
    };
    for &y in target {
        if !(0.0..=max).contains(&y) {
            return Err(label_err(format!(
                "{} target value {y} outside [0, {max}]",
                kind.name()
            )));
        }
    }
    Ok(())
}

/// Task-type loss on `[1, out_dim]` logits and a canonical (possibly soft)
/// label vector. Single-label uses softmax cross-entropy; binary and
/// multi-label use the overflow-safe logistic loss; ordinal regresses
/// `sigmoid(logit)` onto the rank normalized by `k − 1`.
pub fn task_loss<T: Scalar>(
    logits: &Tensor<T>,
    target: &[f64],
    kind: TaskKind,
) -> Result<Tensor<T>, ModelError> {
    if logits.len() != kind.out_dim() {
        return Err(label_err(format!(
            "{} logits have {} entries, expected {}",
            kind.name(),
            logits.len(),
            kind.out_dim()
        )));
    }
    check_label(kind, target)?;
    let as_t = |v: &[f64]| {
        Tensor::<T>::from_vec(v.iter().map(|&x| T::cast(x)).collect(), &[1, v.len()])
    };
    let loss = match kind {
        TaskKind::SingleLabel(_) => {
            let y = as_t(target)?;
            logits.softmax(1)?.log()?.mul(&y)?.sum()?.neg()?
        }
        TaskKind::Binary => {
            let y = T::cast(target[0]);
            let pos = logits.neg()?.softplus()?.mul_scalar(y)?;
            let neg = logits.softplus()?.mul_scalar(T::one() - y)?;
            pos.add(&neg)?.sum()?
        }
        TaskKind::MultiLabel(_) => {
            let y = as_t(target)?;
            let one_minus = as_t(&target.iter().map(|&v| 1.0 - v).collect::<Vec<_>>())?;
            let pos = logits.neg()?.softplus()?.mul(&y)?;
            let neg = logits.softplus()?.mul(&one_minus)?;
            pos.add(&neg)?.mean()?
        }
        TaskKind::Ordinal(k) => {
            let t = T::cast(target[0] / (k - 1) as f64);
            let d = logits.sigmoid()?.add_scalar(-t)?;
            d.mul(&d)?.sum()?
        }
    };
    Ok(loss)
}

/// Hard predictions from logits: `[argmax]` (single-label), `[0/1]`
/// (binary), one 0/1 per class (multi-label), `[round(sigmoid·(k−1))]`
/// (ordinal).
pub fn decode(logits: &[f64], kind: TaskKind) -> Vec<usize> {
    match kind {
        TaskKind::SingleLabel(_) => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            vec![best]
        }
        TaskKind::Binary => vec![usize::from(logits[0] >= 0.0)],
        TaskKind::MultiLabel(_) => logits.iter().map(|&z| usize::from(z >= 0.0)).collect(),
        TaskKind::Ordinal(k) => {
            let v = sigmoid(logits[0]) * (k - 1) as f64;
            vec![(v.round() as usize).min(k - 1)]
        }
    }
}

/// Per-class ranking scores for AUC: softmax probabilities (single-label),
/// `sigmoid` (binary / per class of multi-label), and for ordinal tasks the
/// negated distance between the continuous decode `sigmoid·(k−1)` and each
/// rank.
pub fn class_scores(logits: &[f64], kind: TaskKind) -> Vec<f64> {
    match kind {
        TaskKind::SingleLabel(_) => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        }
        TaskKind::Binary => vec![sigmoid(logits[0])],
        TaskKind::MultiLabel(_) => logits.iter().map(|&z| sigmoid(z)).collect(),
        TaskKind::Ordinal(k) => {
            let v = sigmoid(logits[0]) * (k - 1) as f64;
            (0..k).map(|c| -(v - c as f64).abs()).collect()
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
