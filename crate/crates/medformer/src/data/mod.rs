//! Dataset ingestion and synthesis.
//!
//! Three sources feed the trainer: zip archives of `.npy` arrays (one
//! `{split}_images` / `{split}_labels` pair per split), synthetic datasets
//! with a distinct geometric template per class, and the built-in task
//! registry mapping each bundled dataset to its dimensionality, modality,
//! body part, and label structure. All images are normalized to `[0, 1]`
//! and stored channel-first.

pub mod npy;

use std::path::Path;

use crate::config::{self, ConfigError, Value};
use crate::latents::LatentsConfig;
use crate::model::{canonical_label, Dimensionality, ModelError, TaskKind, TaskSpec};
use crate::tensor::{Scalar, Tensor, TensorError};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use npy::{parse_npy, write_npy, Npy, NpyData};

#[derive(Debug, Error)]
pub enum DataError {
    /// A malformed or missing archive entry, named so users can fix it.
    #[error("ingestion error in '{entry}': {msg}")]
    Ingest { entry: String, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn ingest(entry: impl Into<String>, msg: impl Into<String>) -> DataError {
    DataError::Ingest {
        entry: entry.into(),
        msg: msg.into(),
    }
}

/// The three standard partitions of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One split of one task's data: images `[N, C, ...spatial]` in `[0, 1]`
/// plus integer label rows, validated against the task's label structure.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    images: Tensor<T>,
    labels: Vec<Vec<i64>>,
    split: Split,
    spec: TaskSpec,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<Vec<i64>>,
        split: Split,
        spec: TaskSpec,
    ) -> Result<Self, DataError> {
        spec.validate()?;
        let shape = images.shape().to_vec();
        if shape.len() != spec.input_shape.len() + 1 || shape[1..] != spec.input_shape[..] {
            return Err(ingest(
                &spec.name,
                format!(
                    "images shaped {shape:?} but task expects [N]+{:?}",
                    spec.input_shape
                ),
            ));
        }
        if shape[0] != labels.len() {
            return Err(ingest(
                &spec.name,
                format!("{} images but {} label rows", shape[0], labels.len()),
            ));
        }
        if images.data().iter().any(|v| {
            let x = v.as_f64();
            !(0.0..=1.0).contains(&x)
        }) {
            return Err(ingest(&spec.name, "image values outside [0, 1]"));
        }
        for row in &labels {
            canonical_label(spec.kind, row)?;
        }
        Ok(Dataset {
            images,
            labels,
            split,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    /// Copy of sample `i` shaped `[C, ...spatial]`.
    pub fn image(&self, i: usize) -> Result<Tensor<T>, DataError> {
        if i >= self.len() {
            return Err(ingest(
                &self.spec.name,
                format!("sample {i} out of range (have {})", self.len()),
            ));
        }
        let w: usize = self.spec.input_shape.iter().product();
        let data = self.images.data()[i * w..(i + 1) * w].to_vec();
        Ok(Tensor::from_vec(data, &self.spec.input_shape)?)
    }

    pub fn label(&self, i: usize) -> &[i64] {
        &self.labels[i]
    }

    /// Loss-ready float target for sample `i`.
    pub fn target(&self, i: usize) -> Result<Vec<f64>, DataError> {
        Ok(canonical_label(self.spec.kind, &self.labels[i])?)
    }
}

/// Train/val/test triple for one task.
#[derive(Clone, Debug)]
pub struct SplitSet<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> SplitSet<T> {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Number of distinct templates a task's label structure calls for.
pub fn synth_class_count(kind: TaskKind) -> usize {
    match kind {
        TaskKind::SingleLabel(k) | TaskKind::MultiLabel(k) | TaskKind::Ordinal(k) => k,
        TaskKind::Binary => 2,
    }
}

/// The noiseless image for `class`: a bright bar or slab on a dim
/// background, with class-specific orientation and position so templates
/// stay far apart in pixel space.
pub fn class_template(input_shape: &[usize], class: usize, num_classes: usize) -> Vec<f64> {
    let spatial = &input_shape[1..];
    let axes = spatial.len();
    let axis = class % axes;
    let slot = class / axes;
    let slots = num_classes.div_ceil(axes).max(1);
    let extent = spatial[axis];
    let thick = (extent / 8).max(1);
    let pos = if slots == 1 {
        (extent - thick) / 2
    } else {
        slot * (extent - thick) / (slots - 1)
    };

    // Strides over the spatial axes of one channel.
    let mut strides = vec![1usize; axes];
    for ax in (0..axes.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * spatial[ax + 1];
    }
    let per_channel: usize = spatial.iter().product();
    let mut plane = vec![0.1; per_channel];
    for (i, v) in plane.iter_mut().enumerate() {
        let coord = (i / strides[axis]) % spatial[axis];
        if coord >= pos && coord < pos + thick {
            *v = 0.95;
        }
    }
    let mut out = Vec::with_capacity(input_shape.iter().product());
    for _ in 0..input_shape[0] {
        out.extend_from_slice(&plane);
    }
    out
}

/// Generate `per_class` samples per class: template plus clamped Gaussian
/// pixel noise. Multi-label tasks blend one guaranteed class with extras
/// drawn at 25% each; all other kinds are one class per sample. The same
/// seed reproduces the dataset bit for bit.
pub fn synth_dataset<T: Scalar>(
    spec: &TaskSpec,
    per_class: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset<T>, DataError> {
    use rand::SeedableRng;
    spec.validate()?;
    if per_class == 0 {
        return Err(ingest(&spec.name, "per_class must be at least 1"));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(ingest(&spec.name, format!("noise must be >= 0, got {noise}")));
    }
    let k = synth_class_count(spec.kind);
    let width: usize = spec.input_shape.iter().product();
    let n = k * per_class;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|c| class_template(&spec.input_shape, c, k))
        .collect();

    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let (pixels, row) = match spec.kind {
            TaskKind::MultiLabel(_) => {
                let mut active = vec![false; k];
                active[c] = true;
                for flag in active.iter_mut() {
                    if rng.random::<f64>() < 0.25 {
                        *flag = true;
                    }
                }
                let count = active.iter().filter(|&&a| a).count() as f64;
                let mut mix = vec![0.0; width];
                for (cls, _) in active.iter().enumerate().filter(|(_, &a)| a) {
                    for (m, t) in mix.iter_mut().zip(&templates[cls]) {
                        *m += t / count;
                    }
                }
                (mix, active.iter().map(|&a| a as i64).collect::<Vec<i64>>())
            }
            _ => (templates[c].clone(), vec![c as i64]),
        };
        for p in pixels {
            let v = if noise > 0.0 {
                (p + noise * normal.sample(&mut rng)).clamp(0.0, 1.0)
            } else {
                p
            };
            data.push(T::cast(v));
        }
        labels.push(row);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    let images = Tensor::from_vec(data, &shape)?;
    Dataset::new(images, labels, split, spec.clone())
}

// ---------------------------------------------------------------------------
// Task registry
// ---------------------------------------------------------------------------

/// Latent vocabulary wide enough for every bundled task: all modalities and
/// body parts the registry references, plus one task latent per dataset.
pub fn registry_latents_text() -> &'static str {
    "latents_config:
  dimension_latents:
    - name: 2d_latent
    - name: 3d_latent
  modality_latents:
    - name: xray
    - name: ct
    - name: ultrasound
    - name: microscopy
    - name: oct
    - name: fundus
    - name: mra
    - name: electron_microscopy
  body_part_latents:
    - name: chest
    - name: abdominal
    - name: skin
    - name: eye
    - name: breast
    - name: blood
    - name: kidney
    - name: colon
    - name: bone
    - name: brain
  task_latents:
    - name: pathmnist
    - name: chestmnist
    - name: dermamnist
    - name: octmnist
    - name: pneumoniamnist
    - name: retinamnist
    - name: breastmnist
    - name: bloodmnist
    - name: tissuemnist
    - name: organamnist
    - name: organcmnist
    - name: organsmnist
    - name: organmnist3d
    - name: nodulemnist3d
    - name: adrenalmnist3d
    - name: fracturemnist3d
    - name: vesselmnist3d
    - name: synapsemnist3d
"
}

/// The bundled task table: eighteen benchmark datasets with their
/// dimensionality, modality, body part, and label structure. Class counts
/// are editable defaults, not assertions — pass an amended table to
/// [`task_registry`] to override them.
pub fn builtin_task_table() -> &'static str {
    "tasks:
  - name: pathmnist
    dim: 2d
    modality: microscopy
    body_part: colon
    kind: single_label
    classes: 9
    channels: 3
  - name: chestmnist
    dim: 2d
    modality: xray
    body_part: chest
    kind: binary
  - name: dermamnist
    dim: 2d
    modality: microscopy
    body_part: skin
    kind: single_label
    classes: 7
    channels: 3
  - name: octmnist
    dim: 2d
    modality: oct
    body_part: eye
    kind: single_label
    classes: 4
  - name: pneumoniamnist
    dim: 2d
    modality: xray
    body_part: chest
    kind: binary
  - name: retinamnist
    dim: 2d
    modality: fundus
    body_part: eye
    kind: ordinal
    classes: 5
    channels: 3
  - name: breastmnist
    dim: 2d
    modality: ultrasound
    body_part: breast
    kind: binary
  - name: bloodmnist
    dim: 2d
    modality: microscopy
    body_part: blood
    kind: single_label
    classes: 8
    channels: 3
  - name: tissuemnist
    dim: 2d
    modality: microscopy
    body_part: kidney
    kind: single_label
    classes: 8
  - name: organamnist
    dim: 2d
    modality: ct
    body_part: abdominal
    kind: single_label
    classes: 11
  - name: organcmnist
    dim: 2d
    modality: ct
    body_part: abdominal
    kind: single_label
    classes: 11
  - name: organsmnist
    dim: 2d
    modality: ct
    body_part: abdominal
    kind: single_label
    classes: 11
  - name: organmnist3d
    dim: 3d
    modality: ct
    body_part: abdominal
    kind: single_label
    classes: 11
  - name: nodulemnist3d
    dim: 3d
    modality: ct
    body_part: chest
    kind: binary
  - name: adrenalmnist3d
    dim: 3d
    modality: ct
    body_part: abdominal
    kind: binary
  - name: fracturemnist3d
    dim: 3d
    modality: ct
    body_part: bone
    kind: single_label
    classes: 3
  - name: vesselmnist3d
    dim: 3d
    modality: mra
    body_part: brain
    kind: binary
  - name: synapsemnist3d
    dim: 3d
    modality: electron_microscopy
    body_part: brain
    kind: binary
"
}

/// Parse a task table into validated [`TaskSpec`]s, checking every latent
/// reference against `latents`. Rows take `name`, `dim` (`2d`/`3d`),
/// `modality`, `body_part`, `kind`, plus `classes` (required except for
/// `binary`), `channels` (default 1), and `size` (default 28).
pub fn task_registry(
    latents: &LatentsConfig,
    table: &Value,
) -> Result<Vec<TaskSpec>, DataError> {
    let rows = table
        .get("tasks")
        .ok_or_else(|| ConfigError::schema("tasks", "missing key"))?
        .expect_seq("tasks")?;
    let mut specs: Vec<TaskSpec> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let path = format!("tasks[{i}]");
        let field = |key: &str| -> Result<&Value, ConfigError> {
            row.get(key)
                .ok_or_else(|| ConfigError::schema(format!("{path}.{key}"), "missing key"))
        };
        let name = field("name")?.expect_str(&format!("{path}.name"))?.to_string();
        let dim = match field("dim")?.expect_str(&format!("{path}.dim"))? {
            "2d" => Dimensionality::D2,
            "3d" => Dimensionality::D3,
            other => {
                return Err(
                    ConfigError::schema(format!("{path}.dim"), format!("expected 2d or 3d, got '{other}'")).into(),
                )
            }
        };
        let classes = match row.get("classes") {
            Some(v) => Some(v.expect_parsed::<usize>(&format!("{path}.classes"))?),
            None => None,
        };
        let kind_name = field("kind")?.expect_str(&format!("{path}.kind"))?;
        let need_k = || {
            classes.ok_or_else(|| {
                ConfigError::schema(
                    format!("{path}.classes"),
                    format!("'{kind_name}' tasks need a class count"),
                )
            })
        };
        let kind = match kind_name {
            "single_label" => TaskKind::SingleLabel(need_k()?),
            "binary" => TaskKind::Binary,
            "multi_label" => TaskKind::MultiLabel(need_k()?),
            "ordinal" => TaskKind::Ordinal(need_k()?),
            other => {
                return Err(ConfigError::schema(
                    format!("{path}.kind"),
                    format!("unknown task kind '{other}'"),
                )
                .into())
            }
        };
        let channels = match row.get("channels") {
            Some(v) => v.expect_parsed::<usize>(&format!("{path}.channels"))?,
            None => 1,
        };
        let size = match row.get("size") {
            Some(v) => v.expect_parsed::<usize>(&format!("{path}.size"))?,
            None => 28,
        };
        let mut shape = vec![channels];
        shape.extend(std::iter::repeat(size).take(dim.rank() - 1));
        let modality = field("modality")?.expect_str(&format!("{path}.modality"))?;
        let body = field("body_part")?.expect_str(&format!("{path}.body_part"))?;
        if specs.iter().any(|s| s.name == name) {
            return Err(ConfigError::schema(
                format!("{path}.name"),
                format!("duplicate task '{name}'"),
            )
            .into());
        }
        let spec = TaskSpec::new(name, dim, kind, shape, modality, body);
        spec.validate()?;
        spec.resolve(latents)?;
        specs.push(spec);
    }
    Ok(specs)
}

/// The bundled registry against its bundled latent vocabulary.
pub fn builtin_registry() -> Result<(LatentsConfig, Vec<TaskSpec>), DataError> {
    let latents = LatentsConfig::parse(registry_latents_text())?;
    let table = config::parse(builtin_task_table())?;
    let tasks = task_registry(&latents, &table)?;
    Ok((latents, tasks))
}

// ---------------------------------------------------------------------------
// Archive ingestion
// ---------------------------------------------------------------------------

/// Load a zip archive holding `{train,val,test}_{images,labels}` npy
/// entries, validating shapes against `spec`. Grayscale arrays may omit the
/// channel axis and color arrays may be channels-last; both are normalized
/// to `[N, C, ...spatial]`.
pub fn load_medmnist_archive<T: Scalar>(
    path: &Path,
    spec: &TaskSpec,
) -> Result<SplitSet<T>, DataError> {
    let bytes = std::fs::read(path)?;
    let arrays = read_split_arrays(&bytes, &path.display().to_string(), worker_threads())?;
    let mut parts = Vec::with_capacity(3);
    for (split, (images, labels)) in Split::ALL.iter().zip(arrays) {
        let images_entry = format!("{}_images", split.label());
        let labels_entry = format!("{}_labels", split.label());
        let tensor = images_tensor::<T>(&images, spec, &images_entry)?;
        let rows = label_rows(&labels, &labels_entry)?;
        parts.push(Dataset::new(tensor, rows, *split, spec.clone())?);
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(SplitSet { train, val, test })
}

/// Worker-thread cap: `MEDFORMER_THREADS` when set to a positive integer,
/// otherwise the machine's available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MEDFORMER_THREADS")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Decompress and parse the six split entries, spreading splits over up to
/// `workers` threads. Tensors are not `Send`, so only the raw arrays cross
/// threads; each worker re-opens the zip directory over the shared bytes.
fn read_split_arrays(
    bytes: &[u8],
    archive: &str,
    workers: usize,
) -> Result<Vec<(Npy, Npy)>, DataError> {
    let job = |split: Split| -> Result<(Npy, Npy), DataError> {
        let mut zip = zip::ZipArchive::new(std::io::Cursor::new(bytes))
            .map_err(|e| ingest(archive, format!("not a zip archive: {e}")))?;
        let images_entry = format!("{}_images", split.label());
        let labels_entry = format!("{}_labels", split.label());
        let images = parse_npy(&read_entry(&mut zip, &images_entry)?, &images_entry)?;
        let labels = parse_npy(&read_entry(&mut zip, &labels_entry)?, &labels_entry)?;
        Ok((images, labels))
    };
    let workers = workers.clamp(1, Split::ALL.len());
    if workers == 1 {
        return Split::ALL.iter().map(|&s| job(s)).collect();
    }
    let mut slots: Vec<Option<Result<(Npy, Npy), DataError>>> =
        Split::ALL.iter().map(|_| None).collect();
    std::thread::scope(|s| {
        let job = &job;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < Split::ALL.len() {
                        out.push((i, job(Split::ALL[i])));
                        i += workers;
                    }
                    out
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("split reader panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every split visited")).collect()
}

fn read_entry<R: std::io::Read + std::io::Seek>(
    zip: &mut zip::ZipArchive<R>,
    stem: &str,
) -> Result<Vec<u8>, DataError> {
    use std::io::Read;
    let name = [format!("{stem}.npy"), stem.to_string()]
        .into_iter()
        .find(|n| zip.index_for_name(n).is_some())
        .ok_or_else(|| ingest(stem, "archive entry not found"))?;
    let mut file = zip
        .by_name(&name)
        .map_err(|e| ingest(stem, format!("cannot open entry: {e}")))?;
    let mut buf = Vec::with_capacity(file.size() as usize);
    file.read_to_end(&mut buf)
        .map_err(|e| ingest(stem, format!("cannot read entry: {e}")))?;
    Ok(buf)
}

/// Normalize an image array to `[N, C, ...spatial]` in `[0, 1]`.
fn images_tensor<T: Scalar>(
    npy: &Npy,
    spec: &TaskSpec,
    entry: &str,
) -> Result<Tensor<T>, DataError> {
    let values: Vec<f64> = match &npy.data {
        NpyData::U8(v) => v.iter().map(|&b| b as f64 / 255.0).collect(),
        NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        NpyData::F64(v) => v.clone(),
        NpyData::I32(_) | NpyData::I64(_) => {
            return Err(ingest(entry, "integer image dtype; use u1 or float"))
        }
    };
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(ingest(entry, "float image values outside [0, 1]"));
    }
    if npy.shape.is_empty() {
        return Err(ingest(entry, "image array has no sample axis"));
    }
    let n = npy.shape[0];
    let rest = &npy.shape[1..];
    let want = &spec.input_shape;
    let c = want[0];
    let spatial = &want[1..];
    let data: Vec<f64> = if rest == &want[..] {
        values
    } else if c == 1 && rest == spatial {
        values
    } else if rest.len() == spatial.len() + 1 && &rest[..spatial.len()] == spatial && rest[spatial.len()] == c {
        channels_last_to_first(&values, n, spatial, c)
    } else {
        return Err(ingest(
            entry,
            format!(
                "array shaped {:?} does not match task '{}' input {want:?} (with or without a trailing channel axis)",
                npy.shape, spec.name
            ),
        ));
    };
    let mut shape = vec![n];
    shape.extend_from_slice(want);
    Ok(Tensor::from_vec(data.into_iter().map(T::cast).collect(), &shape)?)
}

/// `[n][...spatial][c]` to `[n][c][...spatial]`.
fn channels_last_to_first(data: &[f64], n: usize, spatial: &[usize], c: usize) -> Vec<f64> {
    let per: usize = spatial.iter().product();
    let mut out = vec![0.0; data.len()];
    for ni in 0..n {
        for s in 0..per {
            for ci in 0..c {
                out[(ni * c + ci) * per + s] = data[(ni * per + s) * c + ci];
            }
        }
    }
    out
}

/// Integer label rows from a `[N]` or `[N, k]` array.
fn label_rows(npy: &Npy, entry: &str) -> Result<Vec<Vec<i64>>, DataError> {
    let values: Vec<i64> = match &npy.data {
        NpyData::U8(v) => v.iter().map(|&b| b as i64).collect(),
        NpyData::I32(v) => v.iter().map(|&x| x as i64).collect(),
        NpyData::I64(v) => v.clone(),
        NpyData::F32(_) | NpyData::F64(_) => {
            return Err(ingest(entry, "labels must be integers"))
        }
    };
    match npy.shape.len() {
        1 => Ok(values.into_iter().map(|v| vec![v]).collect()),
        2 => {
            let k = npy.shape[1];
            if k == 0 {
                return Err(ingest(entry, "label rows are empty"));
            }
            Ok(values.chunks(k).map(|c| c.to_vec()).collect())
        }
        r => Err(ingest(entry, format!("labels must be rank 1 or 2, got rank {r}"))),
    }
}
