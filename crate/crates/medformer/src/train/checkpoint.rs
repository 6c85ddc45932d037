//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `MDFRCKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, a UTF-8 JSON header (model config,
//! latent vocabulary, task table, parameter table, optional optimizer
//! state table), then the raw little-endian payload the tables point into.
//! Save -> load -> save is byte-identical.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, Slot};
use super::TrainError;
use crate::latents::LatentsConfig;
use crate::model::{Medformer, ModelConfig, TaskSpec};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDFRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimSlotEntry {
    name: String,
    step: u64,
    /// Offset of the first-moment buffer; the second moment follows
    /// immediately after it. Both are f64, `len` entries each.
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimEntry {
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    slots: Vec<OptimSlotEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    latents: LatentsConfig,
    tasks: Vec<TaskSpec>,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimEntry>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

/// Serialize a model (and optionally its optimizer state) to bytes.
pub fn checkpoint_bytes<T: Scalar>(
    model: &Medformer<T>,
    opt: Option<&AdamW>,
) -> Result<Vec<u8>, TrainError> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, p) in model.named_params() {
        entries.push(ParamEntry {
            name,
            shape: p.shape().to_vec(),
            dtype: T::DTYPE.name().to_string(),
            offset: payload.len() as u64,
        });
        for v in p.data().iter() {
            v.write_le(&mut payload);
        }
    }
    let optimizer = opt.map(|o| {
        let (lr, betas, eps, weight_decay) = o.hyperparams();
        let mut slots = Vec::new();
        for (name, slot) in o.export_state() {
            slots.push(OptimSlotEntry {
                name,
                step: slot.step,
                offset: payload.len() as u64,
                len: slot.m.len() as u64,
            });
            for v in slot.m.iter().chain(slot.v.iter()) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        OptimEntry {
            lr,
            betas,
            eps,
            weight_decay,
            slots,
        }
    });

    let header = Header {
        model: model.config().clone(),
        latents: model.bank().config().clone(),
        tasks: model.tasks().cloned().collect(),
        params: entries,
        optimizer,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(20 + header_json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Medformer<T>,
    opt: Option<&AdamW>,
) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, checkpoint_bytes(model, opt)?)?;
    Ok(())
}

fn split_file(bytes: &[u8]) -> Result<(Header, &[u8]), TrainError> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| corrupt(format!("malformed header: {e}")))?;
    Ok((header, &bytes[20 + header_len..]))
}

fn read_param<T: Scalar>(
    payload: &[u8],
    entry: &ParamEntry,
) -> Result<Vec<T>, TrainError> {
    if entry.dtype != T::DTYPE.name() {
        return Err(corrupt(format!(
            "parameter '{}' stored as {} but the model uses {}",
            entry.name,
            entry.dtype,
            T::DTYPE.name()
        )));
    }
    let count: usize = entry.shape.iter().product();
    let size = T::DTYPE.size();
    let start = entry.offset as usize;
    let end = start + count * size;
    if payload.len() < end {
        return Err(corrupt(format!(
            "truncated payload: parameter '{}' needs bytes {start}..{end} but only {} are present",
            entry.name,
            payload.len()
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(size)
        .map(T::read_le)
        .collect())
}

/// Rebuild the saved model (and optimizer state, when present).
pub fn load_checkpoint_bytes<T: Scalar>(
    bytes: &[u8],
) -> Result<(Medformer<T>, Option<AdamW>), TrainError> {
    let (header, payload) = split_file(bytes)?;
    // Every parameter is overwritten below, so the init seed is irrelevant.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = Medformer::<T>::new(&header.model, &header.latents, &header.tasks, &mut rng)?;

    let mut live: std::collections::HashMap<String, crate::tensor::Tensor<T>> =
        model.named_params().into_iter().collect();
    let mut loaded = std::collections::HashSet::new();
    for entry in &header.params {
        let Some(p) = live.get(&entry.name) else {
            return Err(corrupt(format!("unknown parameter name '{}'", entry.name)));
        };
        if p.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "parameter '{}' has shape {:?} in the file but {:?} in the model",
                entry.name,
                entry.shape,
                p.shape()
            )));
        }
        let values = read_param::<T>(payload, entry)?;
        p.update_data(|w| w.copy_from_slice(&values));
        loaded.insert(entry.name.clone());
    }
    live.retain(|name, _| !loaded.contains(name));
    if let Some(missing) = live.keys().next() {
        return Err(corrupt(format!("parameter '{missing}' missing from the file")));
    }

    let opt = match header.optimizer {
        None => None,
        Some(o) => {
            let mut adam = AdamW::new(o.lr, o.weight_decay).with_betas(o.betas.0, o.betas.1, o.eps)?;
            let mut state = Vec::new();
            for s in &o.slots {
                let start = s.offset as usize;
                let end = start + 2 * s.len as usize * 8;
                if payload.len() < end {
                    return Err(corrupt(format!(
                        "truncated payload: optimizer slot '{}' out of bounds",
                        s.name
                    )));
                }
                let floats: Vec<f64> = payload[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let (m, v) = floats.split_at(s.len as usize);
                state.push((
                    s.name.clone(),
                    Slot {
                        m: m.to_vec(),
                        v: v.to_vec(),
                        step: s.step,
                    },
                ));
            }
            adam.import_state(state);
            Some(adam)
        }
    };
    Ok((model, opt))
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(Medformer<T>, Option<AdamW>), TrainError> {
    load_checkpoint_bytes(&std::fs::read(path)?)
}

/// Overwrite an existing model's parameters from a checkpoint with an
/// identical parameter set. Used to resume staged training in place.
pub fn restore_checkpoint<T: Scalar>(
    path: &Path,
    model: &Medformer<T>,
) -> Result<(), TrainError> {
    let bytes = std::fs::read(path)?;
    let (header, payload) = split_file(&bytes)?;
    let live: std::collections::HashMap<String, crate::tensor::Tensor<T>> =
        model.named_params().into_iter().collect();
    if header.params.len() != live.len() {
        return Err(corrupt(format!(
            "file has {} parameters but the model has {}",
            header.params.len(),
            live.len()
        )));
    }
    // Validate everything before touching the model.
    let mut staged = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let p = live
            .get(&entry.name)
            .ok_or_else(|| corrupt(format!("unknown parameter name '{}'", entry.name)))?;
        if p.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "parameter '{}' has shape {:?} in the file but {:?} in the model",
                entry.name,
                entry.shape,
                p.shape()
            )));
        }
        staged.push((p.clone(), read_param::<T>(payload, entry)?));
    }
    for (p, values) in staged {
        p.update_data(|w| w.copy_from_slice(&values));
    }
    Ok(())
}

/// Selective load for fine-tuning: copy every stored tensor whose name and
/// shape exist in the target model, leaving everything else (new task
/// heads, new task latents, new input projections) at its fresh
/// initialization. Returns `(copied, skipped)`. The model is only mutated
/// after the whole file validates.
pub fn load_for_finetune<T: Scalar>(
    path: &Path,
    model: &Medformer<T>,
) -> Result<(usize, usize), TrainError> {
    let bytes = std::fs::read(path)?;
    let (header, payload) = split_file(&bytes)?;
    let live: std::collections::HashMap<String, crate::tensor::Tensor<T>> =
        model.named_params().into_iter().collect();
    let mut staged = Vec::new();
    let mut skipped = 0;
    for entry in &header.params {
        let Some(p) = live.get(&entry.name) else {
            skipped += 1;
            continue;
        };
        if p.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "parameter '{}' has shape {:?} in the file but {:?} in the model",
                entry.name,
                entry.shape,
                p.shape()
            )));
        }
        staged.push((p.clone(), read_param::<T>(payload, entry)?));
    }
    let copied = staged.len();
    for (p, values) in staged {
        p.update_data(|w| w.copy_from_slice(&values));
    }
    Ok((copied, skipped))
}

/// Header facts for display, without materializing the model.
#[derive(Clone, Debug)]
pub struct CheckpointSummary {
    pub version: u32,
    /// SHA-256 over the canonical `{model, latents, tasks}` JSON: two
    /// checkpoints with the same digest were built from the same
    /// architecture and task table.
    pub config_digest: String,
    pub dtype: String,
    pub tensor_count: usize,
    /// Total scalar parameter count across all tensors.
    pub scalar_count: usize,
    pub has_optimizer: bool,
    pub model: ModelConfig,
    pub latents: LatentsConfig,
    pub task_names: Vec<String>,
}

/// Read a checkpoint's header without loading any weights.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary, TrainError> {
    let bytes = std::fs::read(path)?;
    let (header, _) = split_file(&bytes)?;
    #[derive(Serialize)]
    struct ConfigOnly<'a> {
        model: &'a ModelConfig,
        latents: &'a LatentsConfig,
        tasks: &'a [TaskSpec],
    }
    let config_json = serde_json::to_vec(&ConfigOnly {
        model: &header.model,
        latents: &header.latents,
        tasks: &header.tasks,
    })?;
    Ok(CheckpointSummary {
        version: CHECKPOINT_VERSION,
        config_digest: hex::encode(Sha256::digest(&config_json)),
        dtype: header
            .params
            .first()
            .map(|p| p.dtype.clone())
            .unwrap_or_else(|| "unknown".into()),
        tensor_count: header.params.len(),
        scalar_count: header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum(),
        has_optimizer: header.optimizer.is_some(),
        model: header.model,
        latents: header.latents,
        task_names: header.tasks.iter().map(|t| t.name.clone()).collect(),
    })
}

/// SHA-256 over parameter names, shapes, and raw little-endian data:
/// the fingerprint used to trace staged-training lineage.
pub fn params_digest<T: Scalar>(model: &Medformer<T>) -> String {
    let mut hasher = Sha256::new();
    for (name, p) in model.named_params() {
        hasher.update(name.as_bytes());
        for d in p.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(p.len() * T::DTYPE.size());
        for v in p.data().iter() {
            v.write_le(&mut bytes);
        }
        hasher.update(&bytes);
    }
    hex::encode(hasher.finalize())
}

/// SHA-256 of a whole checkpoint file.
pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
