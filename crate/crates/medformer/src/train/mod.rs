//! Training loops: the shuffled multi-task trainer, layer-sequential
//! ("backforward") updates, staged sum-augmentation training, and the
//! self-supervised pretraining loop, plus the optimizer, metrics, and
//! checkpoint submodules they build on.

pub mod checkpoint;
pub mod metrics;
pub mod optim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{sum_augment, AugPipeline, AugmentError};
use crate::config::ConfigError;
use crate::data::{DataError, Dataset};
use crate::model::{class_scores, decode, task_loss, Medformer, ModelError, TaskSpec};
use crate::ssl::{ssl_step, Expander, SslConfig, SslError};
use crate::tensor::{no_grad, GradTape, Scalar, Tensor, TensorError};

pub use checkpoint::{
    checkpoint_bytes, file_digest, inspect_checkpoint, load_checkpoint, load_checkpoint_bytes,
    load_for_finetune, params_digest, restore_checkpoint, save_checkpoint, CheckpointSummary,
};
pub use metrics::{accuracy, binary_auc, macro_auc, pair_count_auc};
pub use optim::{clip_global_norm, onecycle_lr, AdamW, ScheduleConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("nan gradient in parameter '{0}'")]
    NanGradient(String),
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("gradient isolation violated: parameter '{0}' has an unexpected gradient")]
    Isolation(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Re-tag non-finite failures as divergence so callers can distinguish
/// "the run blew up" from genuine programming errors.
fn diverged_at(step: usize, e: TrainError) -> TrainError {
    let non_finite = matches!(
        &e,
        TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGrad { .. })
            | TrainError::Model(ModelError::Tensor(
                TensorError::NonFinite { .. } | TensorError::NonFiniteGrad { .. }
            ))
            | TrainError::Ssl(SslError::Tensor(
                TensorError::NonFinite { .. } | TensorError::NonFiniteGrad { .. }
            ))
    );
    if non_finite {
        TrainError::Diverged {
            step,
            msg: e.to_string(),
        }
    } else {
        e
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// One single-task batch of dataset indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: String,
    pub indices: Vec<usize>,
}

/// One epoch of single-task batches over a combined shuffled index: every
/// sample of every task appears exactly once, batches never mix tasks, and
/// batch order is shuffled so task frequency stays proportional to dataset
/// size.
pub fn multitask_sampler(
    sizes: &[(String, usize)],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>, TrainError> {
    if sizes.is_empty() {
        return Err(TrainError::Parameter("sampler needs at least one task".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::Parameter("batch size must be at least 1".into()));
    }
    for (task, n) in sizes {
        if *n == 0 {
            return Err(TrainError::Parameter(format!("task '{task}' has an empty dataset")));
        }
    }
    let mut combined: Vec<(usize, usize)> = Vec::new();
    for (t, (_, n)) in sizes.iter().enumerate() {
        combined.extend((0..*n).map(|i| (t, i)));
    }
    combined.shuffle(rng);

    // Group the shuffled stream by task, preserving within-task order.
    let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    for (t, i) in combined {
        per_task[t].push(i);
    }
    let mut batches = Vec::new();
    for (t, indices) in per_task.into_iter().enumerate() {
        for chunk in indices.chunks(batch_size) {
            batches.push(Batch {
                task: sizes[t].0.clone(),
                indices: chunk.to_vec(),
            });
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Run configuration and reporting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    Backforward,
}

/// What "best checkpoint" means for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestPolicy {
    /// Highest mean validation AUC (mean accuracy when AUC is undefined).
    HighestValAuc,
    /// Lowest mean validation loss.
    LowestValLoss,
    /// Lowest mean training loss since the previous evaluation.
    LowestTrainLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub mode: TrainMode,
    /// Update the layer partition last-to-first instead of first-to-last.
    pub reverse_layers: bool,
    /// Average this many samples (and labels) into each training input;
    /// 1 disables sum augmentation.
    pub sum_augment_k: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Where `best.ckpt` is written; `None` keeps the best model in memory
    /// tracking only.
    pub out: Option<PathBuf>,
    pub best: BestPolicy,
    /// Verify after every backward pass that exactly the batch task's head
    /// and latents received gradients.
    pub audit_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            batch_size: 64,
            max_lr: 1e-3,
            weight_decay: 1e-3,
            warmup_frac: 0.1,
            clip_norm: Some(1.0),
            mode: TrainMode::Standard,
            reverse_layers: false,
            sum_augment_k: 1,
            log_every: 25,
            seed: 0,
            out: None,
            best: BestPolicy::HighestValAuc,
            audit_isolation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Parameter(msg));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.sum_augment_k == 0 {
            return fail("sum_augment_k must be at least 1".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip norm must be positive, got {c}"));
            }
        }
        self.schedule().validate()
    }

    fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            max_lr: self.max_lr,
            total_steps: self.steps,
            warmup_frac: self.warmup_frac,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

/// One logged record; training records carry only loss and lr, evaluation
/// records add the validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMark {
    pub step: usize,
    pub metric: f64,
    pub digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<ReportRecord>,
    pub best: Option<BestMark>,
}

impl RunReport {
    /// One JSON object per line, in logging order.
    pub fn to_json_lines(&self) -> Result<String, TrainError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_json_lines(&self, path: &std::path::Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_json_lines()?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared step machinery
// ---------------------------------------------------------------------------

/// Train/validation pair for one task.
#[derive(Clone, Debug)]
pub struct TaskData<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

fn clear_grads<T: Scalar>(params: &[(String, Tensor<T>)]) {
    for (_, p) in params {
        p.clear_grad();
    }
}

/// Mean task loss over `(input, target)` pairs.
fn batch_loss<T: Scalar>(
    model: &Medformer<T>,
    spec: &TaskSpec,
    pairs: &[(Tensor<T>, Vec<f64>)],
) -> Result<Tensor<T>, TrainError> {
    let mut acc: Option<Tensor<T>> = None;
    for (x, y) in pairs {
        let logits = model.forward(x, &spec.name)?;
        let loss = task_loss(&logits, y, spec.kind)?;
        acc = Some(match acc {
            Some(a) => a.add(&loss)?,
            None => loss,
        });
    }
    let acc = acc.ok_or_else(|| TrainError::Parameter("empty batch".into()))?;
    Ok(acc.mul_scalar(T::cast(1.0 / pairs.len() as f64))?)
}

/// Materialize a batch, folding groups of `k` samples into sum-augmented
/// hybrids when `k > 1`.
fn assemble_pairs<T: Scalar>(
    ds: &Dataset<T>,
    indices: &[usize],
    k: usize,
) -> Result<Vec<(Tensor<T>, Vec<f64>)>, TrainError> {
    let mut singles = Vec::with_capacity(indices.len());
    for &i in indices {
        singles.push((ds.image(i)?, ds.target(i)?));
    }
    if k <= 1 {
        return Ok(singles);
    }
    let mut out = Vec::with_capacity(singles.len().div_ceil(k));
    for chunk in singles.chunks(k) {
        let xs: Vec<Tensor<T>> = chunk.iter().map(|(x, _)| x.clone()).collect();
        let ys: Vec<Vec<f64>> = chunk.iter().map(|(_, y)| y.clone()).collect();
        out.push(sum_augment(&xs, &ys)?);
    }
    Ok(out)
}

/// Check that exactly the batch task's head and four latents took part in
/// the backward pass, and no other task's category-specific parameters did.
pub fn audit_isolation<T: Scalar>(
    model: &Medformer<T>,
    spec: &TaskSpec,
) -> Result<(), TrainError> {
    for (name, p) in model.named_params() {
        let has_grad = p.grad().is_some();
        let head_prefix = format!("head.{}.", spec.name);
        let expected = if name.starts_with("head.") {
            Some(name.starts_with(&head_prefix))
        } else if let Some(rest) = name.strip_prefix("latent.task.") {
            Some(rest == spec.task_latent)
        } else if let Some(rest) = name.strip_prefix("latent.dimension.") {
            Some(rest == spec.dimension_latent)
        } else if let Some(rest) = name.strip_prefix("latent.modality.") {
            Some(rest == spec.modality_latent)
        } else if let Some(rest) = name.strip_prefix("latent.body_part.") {
            Some(rest == spec.body_part_latent)
        } else {
            None // Shared parameters may or may not participate.
        };
        if let Some(want) = expected {
            if has_grad != want {
                return Err(TrainError::Isolation(name));
            }
        }
    }
    Ok(())
}

/// Forward/backward pass counts for one layer-sequential batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassStats {
    pub forward_passes: usize,
    pub backward_passes: usize,
}

/// One layer-sequential ("backforward") batch over an ordered parameter
/// partition: for each group in turn, rebuild the loss from the current
/// weights, run a full backward pass, and apply the optimizer to that group
/// only — so every group's update sees all updates already applied to
/// earlier groups within this batch.
pub fn backforward_over<T, F>(
    groups: &[(String, Vec<(String, Tensor<T>)>)],
    mut forward: F,
    opt: &mut AdamW,
    clip_norm: Option<f64>,
    reverse: bool,
) -> Result<(f64, PassStats), TrainError>
where
    T: Scalar,
    F: FnMut() -> Result<Tensor<T>, TrainError>,
{
    if groups.is_empty() {
        return Err(TrainError::Parameter("backforward needs at least one layer group".into()));
    }
    let all: Vec<(String, Tensor<T>)> = groups.iter().flat_map(|(_, g)| g.clone()).collect();
    let order: Vec<usize> = if reverse {
        (0..groups.len()).rev().collect()
    } else {
        (0..groups.len()).collect()
    };
    let mut stats = PassStats::default();
    let mut last_loss = 0.0;
    for gi in order {
        clear_grads(&all);
        let loss = forward()?;
        stats.forward_passes += 1;
        GradTape::for_loss(&loss)?.backward()?;
        stats.backward_passes += 1;
        if let Some(c) = clip_norm {
            clip_global_norm(&all, c)?;
        }
        opt.step(&groups[gi].1)?;
        last_loss = loss.item()?.as_f64();
    }
    Ok((last_loss, stats))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Mean loss, accuracy, and macro AUC (when defined) over one dataset.
pub fn evaluate<T: Scalar>(
    model: &Medformer<T>,
    ds: &Dataset<T>,
) -> Result<(f64, f64, Option<f64>), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::Parameter("cannot evaluate an empty dataset".into()));
    }
    let spec = ds.spec().clone();
    let mut loss_sum = 0.0;
    let mut decoded = Vec::with_capacity(ds.len());
    let mut scores = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    no_grad(|| -> Result<(), TrainError> {
        for i in 0..ds.len() {
            let x = ds.image(i)?;
            let y = ds.target(i)?;
            let logits = model.forward(&x, &spec.name)?;
            loss_sum += task_loss(&logits, &y, spec.kind)?.item()?.as_f64();
            let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
            decoded.push(decode(&row, spec.kind));
            scores.push(class_scores(&row, spec.kind));
            labels.push(ds.label(i).to_vec());
        }
        Ok(())
    })?;
    let acc = accuracy(&decoded, &labels, spec.kind)?;
    let auc = match macro_auc(&scores, &labels, spec.kind) {
        Ok(a) => Some(a),
        Err(TrainError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((loss_sum / ds.len() as f64, acc, auc))
}

struct BestTracker {
    policy: BestPolicy,
    mark: Option<BestMark>,
}

impl BestTracker {
    fn new(policy: BestPolicy) -> Self {
        BestTracker { policy, mark: None }
    }

    fn improves(&self, metric: f64) -> bool {
        match (&self.mark, self.policy) {
            (None, _) => true,
            (Some(b), BestPolicy::HighestValAuc) => metric > b.metric,
            (Some(b), _) => metric < b.metric,
        }
    }
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

/// Run the supervised trainer. Samples single-task batches from a combined
/// shuffled index, applies optional sum augmentation, steps AdamW under a
/// one-cycle schedule, evaluates every `log_every` steps, and keeps the
/// best checkpoint according to `cfg.best` (written to `out/best.ckpt`
/// when an output directory is set; the file survives a later divergence
/// abort). Divergence (a non-finite loss or gradient) aborts the run.
pub fn train<T: Scalar>(
    model: &Medformer<T>,
    data: &[TaskData<T>],
    cfg: &TrainConfig,
) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Parameter("training needs at least one task".into()));
    }
    let mut specs = Vec::new();
    for td in data {
        let name = &td.train.spec().name;
        model.task(name)?;
        if td.val.is_empty() {
            return Err(TrainError::Parameter(format!(
                "task '{name}' has an empty validation split"
            )));
        }
        specs.push(model.task(name)?.clone());
    }
    let sizes: Vec<(String, usize)> = data
        .iter()
        .map(|td| (td.train.spec().name.clone(), td.train.len()))
        .collect();

    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.max_lr, cfg.weight_decay);
    let params = model.named_params();
    let groups = model.param_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = RunReport::default();
    let mut best = BestTracker::new(cfg.best);
    let mut losses_since_eval: Vec<f64> = Vec::new();
    let mut step = 0;

    'run: loop {
        let batches = multitask_sampler(&sizes, cfg.batch_size, &mut rng)?;
        for batch in batches {
            if step >= cfg.steps {
                break 'run;
            }
            let lr = onecycle_lr(step, &schedule)?;
            opt.set_lr(lr);
            let ti = data
                .iter()
                .position(|td| td.train.spec().name == batch.task)
                .expect("sampler tasks come from data");
            let spec = &specs[ti];
            let pairs = assemble_pairs(&data[ti].train, &batch.indices, cfg.sum_augment_k)?;

            let loss_val = (|| -> Result<f64, TrainError> {
                match cfg.mode {
                    TrainMode::Standard => {
                        clear_grads(&params);
                        let loss = batch_loss(model, spec, &pairs)?;
                        GradTape::for_loss(&loss)?.backward()?;
                        if cfg.audit_isolation {
                            audit_isolation(model, spec)?;
                        }
                        if let Some(c) = cfg.clip_norm {
                            clip_global_norm(&params, c)?;
                        }
                        opt.step(&params)?;
                        Ok(loss.item()?.as_f64())
                    }
                    TrainMode::Backforward => {
                        let (loss, _) = backforward_over(
                            &groups,
                            || {
                                let loss = batch_loss(model, spec, &pairs)?;
                                if cfg.audit_isolation {
                                    // Audit the previous pass's gradients
                                    // before they are consumed again.
                                }
                                Ok(loss)
                            },
                            &mut opt,
                            cfg.clip_norm,
                            cfg.reverse_layers,
                        )?;
                        if cfg.audit_isolation {
                            audit_isolation(model, spec)?;
                        }
                        Ok(loss)
                    }
                }
            })()
            .map_err(|e| diverged_at(step, e))?;

            report.records.push(ReportRecord {
                step,
                task: batch.task.clone(),
                loss: loss_val,
                lr,
                accuracy: None,
                auc: None,
            });
            losses_since_eval.push(loss_val);
            step += 1;

            if step % cfg.log_every == 0 || step == cfg.steps {
                let metric = log_eval(model, data, step, lr, &mut report, &mut losses_since_eval)?;
                let chosen = match cfg.best {
                    BestPolicy::HighestValAuc => metric.0,
                    BestPolicy::LowestValLoss => metric.1,
                    BestPolicy::LowestTrainLoss => metric.2,
                };
                if best.improves(chosen) {
                    best.mark = Some(BestMark {
                        step,
                        metric: chosen,
                        digest: params_digest(model),
                    });
                    if let Some(dir) = &cfg.out {
                        save_checkpoint(&dir.join("best.ckpt"), model, Some(&opt))?;
                    }
                }
            }
        }
    }
    report.best = best.mark;
    Ok(report)
}

/// Evaluate every task, append eval records, and return
/// `(mean auc-or-accuracy, mean val loss, mean train loss since last eval)`.
fn log_eval<T: Scalar>(
    model: &Medformer<T>,
    data: &[TaskData<T>],
    step: usize,
    lr: f64,
    report: &mut RunReport,
    losses_since_eval: &mut Vec<f64>,
) -> Result<(f64, f64, f64), TrainError> {
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    let mut acc_sum = 0.0;
    let mut loss_sum = 0.0;
    for td in data {
        let (val_loss, acc, auc) = evaluate(model, &td.val)?;
        if let Some(a) = auc {
            auc_sum += a;
            auc_count += 1;
        }
        acc_sum += acc;
        loss_sum += val_loss;
        report.records.push(ReportRecord {
            step,
            task: td.val.spec().name.clone(),
            loss: val_loss,
            lr,
            accuracy: Some(acc),
            auc,
        });
    }
    let n = data.len() as f64;
    let headline = if auc_count > 0 {
        auc_sum / auc_count as f64
    } else {
        acc_sum / n
    };
    let train_mean = if losses_since_eval.is_empty() {
        f64::INFINITY
    } else {
        losses_since_eval.iter().sum::<f64>() / losses_since_eval.len() as f64
    };
    losses_since_eval.clear();
    Ok((headline, loss_sum / n, train_mean))
}

// ---------------------------------------------------------------------------
// Self-supervised training
// ---------------------------------------------------------------------------

/// Self-supervised pretraining over the train splits only: each batch
/// takes two augmented views per sample, runs the trunk under the tasks'
/// domain latents, and minimizes the configured objective. Output-side
/// parameters never receive gradients, so only the trunk and domain
/// latents move. The best (lowest mean loss) model checkpoint excludes the
/// expander, which fine-tuning discards anyway.
pub fn train_ssl<T: Scalar>(
    model: &Medformer<T>,
    expander: &Expander<T>,
    data: &[Dataset<T>],
    pipeline: &AugPipeline,
    ssl: &SslConfig,
    cfg: &TrainConfig,
) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Parameter("ssl training needs at least one dataset".into()));
    }
    if cfg.batch_size < 2 {
        return Err(TrainError::Parameter(
            "self-supervised batches need at least 2 samples".into(),
        ));
    }
    for ds in data {
        model.task(&ds.spec().name)?;
    }
    let sizes: Vec<(String, usize)> = data
        .iter()
        .map(|ds| (ds.spec().name.clone(), ds.len()))
        .collect();
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.max_lr, cfg.weight_decay);
    let mut params = model.named_params();
    params.extend(expander.named_params("expander"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = RunReport::default();
    let mut best = BestTracker::new(BestPolicy::LowestTrainLoss);
    let mut losses_since_eval: Vec<f64> = Vec::new();
    let mut step = 0;

    'run: loop {
        let batches = multitask_sampler(&sizes, cfg.batch_size, &mut rng)?;
        for batch in batches {
            if step >= cfg.steps {
                break 'run;
            }
            if batch.indices.len() < 2 {
                continue; // Leftover chunk too small for a two-view objective.
            }
            let lr = onecycle_lr(step, &schedule)?;
            opt.set_lr(lr);
            let ds = data
                .iter()
                .find(|d| d.spec().name == batch.task)
                .expect("sampler tasks come from data");
            let mut samples = Vec::with_capacity(batch.indices.len());
            for &i in &batch.indices {
                samples.push((ds.image(i)?, batch.task.clone()));
            }
            let loss_val = (|| -> Result<f64, TrainError> {
                clear_grads(&params);
                let loss = ssl_step(model, expander, &samples, pipeline, ssl, &mut rng)?;
                GradTape::for_loss(&loss)?.backward()?;
                if let Some(c) = cfg.clip_norm {
                    clip_global_norm(&params, c)?;
                }
                opt.step(&params)?;
                Ok(loss.item()?.as_f64())
            })()
            .map_err(|e| diverged_at(step, e))?;

            report.records.push(ReportRecord {
                step,
                task: batch.task.clone(),
                loss: loss_val,
                lr,
                accuracy: None,
                auc: None,
            });
            losses_since_eval.push(loss_val);
            step += 1;

            if step % cfg.log_every == 0 || step == cfg.steps {
                let mean =
                    losses_since_eval.iter().sum::<f64>() / losses_since_eval.len() as f64;
                losses_since_eval.clear();
                if best.improves(mean) {
                    best.mark = Some(BestMark {
                        step,
                        metric: mean,
                        digest: params_digest(model),
                    });
                    if let Some(dir) = &cfg.out {
                        save_checkpoint(&dir.join("best.ckpt"), model, Some(&opt))?;
                    }
                }
            }
        }
    }
    report.best = best.mark;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Staged sum-augmentation training
// ---------------------------------------------------------------------------

/// One stage of the halving-K schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsaStage {
    pub k: usize,
    /// Parameter digest the stage started from.
    pub start_digest: String,
    /// Digest of the stage's best checkpoint, which the next stage resumes.
    pub best_digest: String,
    pub best_metric: f64,
    pub report: RunReport,
}

/// Staged training over the halving schedule `K0, K0/2, ..., 1`: each
/// stage trains with K-sample sum augmentation, keeps its lowest
/// validation-loss checkpoint, and the next stage resumes from it. The
/// stage directories live under `cfg.out`, which is therefore required.
pub fn train_csa<T: Scalar>(
    model: &Medformer<T>,
    data: &[TaskData<T>],
    k0: usize,
    cfg: &TrainConfig,
) -> Result<Vec<CsaStage>, TrainError> {
    let out = cfg.out.clone().ok_or_else(|| {
        TrainError::Parameter("staged training needs an output directory for stage checkpoints".into())
    })?;
    let schedule = crate::augment::cascade_schedule(k0)?;
    let mut stages = Vec::with_capacity(schedule.len());
    for (si, k) in schedule.into_iter().enumerate() {
        let stage_dir = out.join(format!("stage_k{k}"));
        let stage_cfg = TrainConfig {
            sum_augment_k: k,
            best: BestPolicy::LowestValLoss,
            out: Some(stage_dir.clone()),
            seed: cfg.seed.wrapping_add(si as u64),
            ..cfg.clone()
        };
        let start_digest = params_digest(model);
        let report = train(model, data, &stage_cfg)?;
        let mark = report
            .best
            .clone()
            .ok_or_else(|| TrainError::Checkpoint("stage produced no best checkpoint".into()))?;
        restore_checkpoint(&stage_dir.join("best.ckpt"), model)?;
        let best_digest = params_digest(model);
        debug_assert_eq!(best_digest, mark.digest);
        stages.push(CsaStage {
            k,
            start_digest,
            best_digest,
            best_metric: mark.metric,
            report,
        });
    }
    Ok(stages)
}
