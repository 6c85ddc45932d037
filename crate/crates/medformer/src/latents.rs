//! Learned latent vocabularies that condition the shared trunk.
//!
//! Four categories of named latents exist: dimensionality (2-D vs 3-D),
//! imaging modality, body part, and task. Each latent is a small trainable
//! `[tokens_per_latent, latent_dim]` matrix. The input side of the model
//! attends over the concatenation of one latent from each of the first
//! three categories; the output side attends over the task latent. Only
//! latents selected for a sample participate in its graph, so gradient
//! flow — and therefore the parameter audit in the trainer — is isolated
//! per category member by construction.

use indexmap::IndexMap;
use thiserror::Error;

use crate::config::{self, ConfigError, Value};
use crate::tensor::{Scalar, Tensor, TensorError};

/// The four latent vocabularies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentCategory {
    Dimension,
    Modality,
    BodyPart,
    Task,
}

impl LatentCategory {
    pub const ALL: [LatentCategory; 4] = [
        LatentCategory::Dimension,
        LatentCategory::Modality,
        LatentCategory::BodyPart,
        LatentCategory::Task,
    ];

    /// Key used in config files.
    pub fn key(self) -> &'static str {
        match self {
            LatentCategory::Dimension => "dimension_latents",
            LatentCategory::Modality => "modality_latents",
            LatentCategory::BodyPart => "body_part_latents",
            LatentCategory::Task => "task_latents",
        }
    }

    /// Short label used in parameter names and error messages.
    pub fn label(self) -> &'static str {
        match self {
            LatentCategory::Dimension => "dimension",
            LatentCategory::Modality => "modality",
            LatentCategory::BodyPart => "body_part",
            LatentCategory::Task => "task",
        }
    }
}

/// Latent lookup and shape errors.
#[derive(Debug, Error)]
pub enum LatentsError {
    #[error("unknown {category} latent '{name}' (known: {known})")]
    UnknownLatent {
        category: &'static str,
        name: String,
        known: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named members of each latent category, in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatentsConfig {
    pub dimension: Vec<String>,
    pub modality: Vec<String>,
    pub body_part: Vec<String>,
    pub task: Vec<String>,
}

impl LatentsConfig {
    pub fn names(&self, category: LatentCategory) -> &[String] {
        match category {
            LatentCategory::Dimension => &self.dimension,
            LatentCategory::Modality => &self.modality,
            LatentCategory::BodyPart => &self.body_part,
            LatentCategory::Task => &self.task,
        }
    }

    fn names_mut(&mut self, category: LatentCategory) -> &mut Vec<String> {
        match category {
            LatentCategory::Dimension => &mut self.dimension,
            LatentCategory::Modality => &mut self.modality,
            LatentCategory::BodyPart => &mut self.body_part,
            LatentCategory::Task => &mut self.task,
        }
    }

    /// Parse from config text. The categories may sit at the top level or
    /// under a single `latents_config:` root key. Unknown keys, non-`name`
    /// item fields, and duplicate names within a category are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc = config::parse(text)?;
        Self::from_value(&doc, "latents config")
    }

    /// Interpret an already-parsed tree (used both for standalone files and
    /// for blocks embedded in a run config).
    pub fn from_value(doc: &Value, path: &str) -> Result<Self, ConfigError> {
        let entries = doc.expect_map(path)?;
        let root = match entries {
            [(key, inner)] if key == "latents_config" => inner,
            _ => doc,
        };
        let mut out = LatentsConfig::default();
        for (key, value) in root.expect_map(path)? {
            let Some(category) = LatentCategory::ALL
                .into_iter()
                .find(|c| c.key() == key)
            else {
                return Err(ConfigError::schema(
                    format!("{path}.{key}"),
                    format!(
                        "unknown key; expected one of {}",
                        LatentCategory::ALL.map(|c| c.key()).join(", ")
                    ),
                ));
            };
            let items = value.expect_seq(&format!("{path}.{key}"))?;
            for (i, item) in items.iter().enumerate() {
                let item_path = format!("{path}.{key}[{i}]");
                let fields = item.expect_map(&item_path)?;
                let mut name = None;
                for (fk, fv) in fields {
                    if fk != "name" {
                        return Err(ConfigError::schema(
                            format!("{item_path}.{fk}"),
                            "latent entries accept only 'name'",
                        ));
                    }
                    name = Some(fv.expect_str(&item_path)?.to_string());
                }
                let name = name.ok_or_else(|| {
                    ConfigError::schema(&item_path, "missing 'name'")
                })?;
                if name.is_empty() {
                    return Err(ConfigError::schema(&item_path, "empty latent name"));
                }
                let list = out.names_mut(category);
                if list.contains(&name) {
                    return Err(ConfigError::schema(
                        format!("{path}.{key}"),
                        format!("duplicate latent name '{name}'"),
                    ));
                }
                list.push(name);
            }
        }
        Ok(out)
    }

    /// Canonical serialization (with the `latents_config:` root key).
    pub fn to_text(&self) -> String {
        let categories = LatentCategory::ALL
            .into_iter()
            .map(|c| {
                let items = self
                    .names(c)
                    .iter()
                    .map(|n| Value::Map(vec![("name".into(), Value::Str(n.clone()))]))
                    .collect();
                (c.key().to_string(), Value::Seq(items))
            })
            .collect();
        config::to_text(&Value::Map(vec![(
            "latents_config".into(),
            Value::Map(categories),
        )]))
    }
}

/// The trainable latent store: one `[tokens_per_latent, latent_dim]` tensor
/// per configured name, initialized i.i.d. normal(0, 0.02²) in declaration
/// order (deterministic per seed).
pub struct LatentBank<T: Scalar> {
    tokens_per_latent: usize,
    latent_dim: usize,
    config: LatentsConfig,
    categories: [IndexMap<String, Tensor<T>>; 4],
}

impl<T: Scalar> LatentBank<T> {
    pub fn init(
        config: &LatentsConfig,
        tokens_per_latent: usize,
        latent_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let categories = LatentCategory::ALL.map(|cat| {
            config
                .names(cat)
                .iter()
                .map(|name| {
                    let t = Tensor::randn(&[tokens_per_latent, latent_dim], 0.0, 0.02, rng)
                        .trainable();
                    (name.clone(), t)
                })
                .collect()
        });
        LatentBank {
            tokens_per_latent,
            latent_dim,
            config: config.clone(),
            categories,
        }
    }

    pub fn tokens_per_latent(&self) -> usize {
        self.tokens_per_latent
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn config(&self) -> &LatentsConfig {
        &self.config
    }

    fn map(&self, category: LatentCategory) -> &IndexMap<String, Tensor<T>> {
        &self.categories[LatentCategory::ALL
            .iter()
            .position(|c| *c == category)
            .expect("category present")]
    }

    /// Fetch one latent by category and name.
    pub fn get(
        &self,
        category: LatentCategory,
        name: &str,
    ) -> Result<&Tensor<T>, LatentsError> {
        self.map(category)
            .get(name)
            .ok_or_else(|| LatentsError::UnknownLatent {
                category: category.label(),
                name: name.to_string(),
                known: self
                    .map(category)
                    .keys()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    /// The input-side conditioning block: dimension, modality, and body-part
    /// latents stacked in that order into a `[3·tokens_per_latent,
    /// latent_dim]` matrix. Gradients flow back to exactly the three
    /// selected latents.
    pub fn select_input(
        &self,
        dimension: &str,
        modality: &str,
        body_part: &str,
    ) -> Result<Tensor<T>, LatentsError> {
        let parts = [
            self.get(LatentCategory::Dimension, dimension)?.clone(),
            self.get(LatentCategory::Modality, modality)?.clone(),
            self.get(LatentCategory::BodyPart, body_part)?.clone(),
        ];
        Ok(Tensor::concat(0, &parts)?)
    }

    /// The output-side conditioning block for one task.
    pub fn select_task(&self, task: &str) -> Result<Tensor<T>, LatentsError> {
        Ok(self.get(LatentCategory::Task, task)?.clone())
    }

    /// All latents as named parameters (`latent.<category>.<name>`), in
    /// deterministic declaration order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        LatentCategory::ALL
            .into_iter()
            .flat_map(|cat| {
                self.map(cat)
                    .iter()
                    .map(move |(name, t)| (format!("latent.{}.{name}", cat.label()), t.clone()))
            })
            .collect()
    }
}

/// The latent vocabulary from the model's reference configuration: one
/// latent per dimensionality, a starter set of modalities and body parts,
/// and one latent per bundled task.
pub fn reference_latents_text() -> &'static str {
    "latents_config:
  dimension_latents:
    - name: 2d_latent
    - name: 3d_latent
  modality_latents:
    - name: chest_xray
    - name: ct_scan
    - name: microscopic
  body_part_latents:
    - name: chest
    - name: abdominal
    - name: brain
  task_latents:
    - name: chestmnist_binary
    - name: retinamnist_ordinal
    - name: pathmnist_singlelabel
"
}
