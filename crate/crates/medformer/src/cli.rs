//! Command-line front end: one config file (the same restricted YAML
//! subset as the latent vocabulary) drives supervised, multi-task,
//! self-supervised, fine-tuning, and evaluation runs; flags are thin
//! overrides. Exit codes: 0 success, 1 configuration or usage error,
//! 2 runtime divergence.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{test_time_sum_augment, AugPipeline};
use crate::config::{self, ConfigError, Value};
use crate::data::{
    builtin_task_table, load_medmnist_archive, registry_latents_text, synth_dataset,
    task_registry, Dataset, Split, SplitSet,
};
use crate::latents::LatentsConfig;
use crate::model::{class_scores, decode, task_loss, Medformer, ModelConfig, TaskSpec};
use crate::ssl::{Expander, SslConfig, SslObjective};
use crate::tensor::{no_grad, Scalar};
use crate::train::{
    self, accuracy, inspect_checkpoint, load_checkpoint, load_for_finetune, macro_auc,
    save_checkpoint, train_csa, train_ssl, BestPolicy, ReportRecord, RunReport, TaskData,
    TrainConfig, TrainError, TrainMode,
};
use crate::Error;

#[derive(Parser)]
#[command(
    name = "medformer",
    version,
    about = "Multitask multimodal transformer for small medical-imaging benchmarks",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file (restricted YAML subset).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training on the configured tasks.
    Train(RunArgs),
    /// Supervised training across several tasks at once.
    Multitask(RunArgs),
    /// Self-supervised pretraining of the shared trunk.
    SslPretrain(RunArgs),
    /// Supervised training warm-started from a checkpoint's matching tensors.
    Finetune {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoint to warm-start from; tensors absent from the new
        /// model (old heads, old task latents) are skipped.
        #[arg(long, value_name = "FILE")]
        from: PathBuf,
    },
    /// Metrics for a checkpoint on a held-out split.
    Eval {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoint to evaluate; the model is rebuilt from its header.
        #[arg(long, value_name = "FILE")]
        from: PathBuf,
        /// Test-time sum augmentation, e.g. `K=2,reps=4`.
        #[arg(long, value_name = "SPEC")]
        ttsa: Option<String>,
    },
    /// Print a checkpoint's header summary.
    InspectCheckpoint {
        /// Checkpoint file.
        path: PathBuf,
    },
}

/// Parse `argv` and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = validate_thread_cap() {
        eprintln!("error: {msg}");
        return 1;
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match &e {
                Error::Train(TrainError::Diverged { .. }) => 2,
                _ => 1,
            }
        }
    }
}

fn validate_thread_cap() -> Result<(), String> {
    let Some(raw) = std::env::var_os("MEDFORMER_THREADS") else {
        return Ok(());
    };
    let ok = raw
        .to_str()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .is_some_and(|n| n > 0);
    if ok {
        Ok(())
    } else {
        Err(format!(
            "MEDFORMER_THREADS must be a positive integer, got {raw:?}"
        ))
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => run_supervised(&args, None, false),
        Command::Multitask(args) => run_supervised(&args, None, true),
        Command::Finetune { args, from } => run_supervised(&args, Some(&from), false),
        Command::SslPretrain(args) => run_ssl(&args),
        Command::Eval { args, from, ttsa } => run_eval(&args, &from, ttsa.as_deref()),
        Command::InspectCheckpoint { path } => run_inspect(&path),
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Everything a run needs, assembled from the config file plus overrides.
struct RunSpec {
    seed: u64,
    train: TrainConfig,
    /// Staged sum-augmentation start size; set on `train` runs only.
    csa_k0: Option<usize>,
    model: ModelConfig,
    latents: LatentsConfig,
    selections: Vec<Selection>,
    ssl: SslConfig,
    eval_split: Split,
    ttsa: Option<(usize, usize)>,
}

struct Selection {
    spec: TaskSpec,
    source: Source,
}

enum Source {
    Synthetic { per_class: usize, noise: f64 },
    Archive(PathBuf),
}

fn opt_parsed<T: std::str::FromStr>(
    map: &Value,
    key: &str,
    path: &str,
) -> Result<Option<T>, ConfigError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.expect_parsed::<T>(&format!("{path}.{key}")).map(Some),
    }
}

fn opt_str<'v>(map: &'v Value, key: &str, path: &str) -> Result<Option<&'v str>, ConfigError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.expect_str(&format!("{path}.{key}")).map(Some),
    }
}

fn build_run_spec(args: &RunArgs) -> Result<RunSpec, Error> {
    let root = config::parse_file(&args.config)?;

    let mut t = TrainConfig::default();
    let mut seed: Option<u64> = None;
    let mut csa_k0 = None;
    if let Some(run) = root.get("run") {
        seed = opt_parsed(run, "seed", "run")?;
        if let Some(v) = opt_parsed(run, "steps", "run")? {
            t.steps = v;
        }
        if let Some(v) = opt_parsed(run, "batch_size", "run")? {
            t.batch_size = v;
        }
        if let Some(v) = opt_parsed(run, "max_lr", "run")? {
            t.max_lr = v;
        }
        if let Some(v) = opt_parsed(run, "weight_decay", "run")? {
            t.weight_decay = v;
        }
        if let Some(v) = opt_parsed(run, "warmup_frac", "run")? {
            t.warmup_frac = v;
        }
        if let Some(v) = opt_parsed(run, "sum_augment_k", "run")? {
            t.sum_augment_k = v;
        }
        if let Some(v) = opt_parsed(run, "log_every", "run")? {
            t.log_every = v;
        }
        if let Some(s) = opt_str(run, "clip_norm", "run")? {
            t.clip_norm = if s == "none" {
                None
            } else {
                Some(run.get("clip_norm").unwrap().expect_parsed("run.clip_norm")?)
            };
        }
        if let Some(s) = opt_str(run, "mode", "run")? {
            t.mode = match s {
                "standard" => TrainMode::Standard,
                "backforward" => TrainMode::Backforward,
                other => {
                    return Err(ConfigError::schema(
                        "run.mode",
                        format!("unknown mode '{other}' (standard or backforward)"),
                    )
                    .into())
                }
            };
        }
        if let Some(v) = run.get("reverse_layers") {
            t.reverse_layers = v.expect_bool("run.reverse_layers")?;
        }
        if let Some(v) = run.get("audit_isolation") {
            t.audit_isolation = v.expect_bool("run.audit_isolation")?;
        }
        if let Some(s) = opt_str(run, "out", "run")? {
            t.out = Some(PathBuf::from(s));
        }
        if let Some(s) = opt_str(run, "best", "run")? {
            t.best = match s {
                "highest_val_auc" => BestPolicy::HighestValAuc,
                "lowest_val_loss" => BestPolicy::LowestValLoss,
                "lowest_train_loss" => BestPolicy::LowestTrainLoss,
                other => {
                    return Err(ConfigError::schema(
                        "run.best",
                        format!("unknown best policy '{other}'"),
                    )
                    .into())
                }
            };
        }
        csa_k0 = opt_parsed(run, "csa_k0", "run")?;
    }
    if let Some(s) = args.seed {
        seed = Some(s);
    }
    if let Some(s) = args.steps {
        t.steps = s;
    }
    if let Some(l) = args.lr {
        t.max_lr = l;
    }
    if let Some(o) = &args.out {
        t.out = Some(o.clone());
    }
    let seed = seed.ok_or_else(|| {
        ConfigError::schema("run.seed", "a seed is required (config key or --seed)")
    })?;
    t.seed = seed;

    let model = parse_model(root.get("model"))?;

    let latents = match opt_str(&root, "latents_file", "")? {
        Some(p) => LatentsConfig::parse(&std::fs::read_to_string(p)?)?,
        None => LatentsConfig::parse(registry_latents_text())?,
    };
    let table = match opt_str(&root, "task_table", "")? {
        Some(p) => config::parse_file(Path::new(p))?,
        None => config::parse(builtin_task_table())?,
    };
    let registry = task_registry(&latents, &table)?;

    let rows = root
        .get("tasks")
        .ok_or_else(|| ConfigError::schema("tasks", "missing key"))?
        .expect_seq("tasks")?;
    if rows.is_empty() {
        return Err(ConfigError::schema("tasks", "select at least one task").into());
    }
    let mut selections: Vec<Selection> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let path = format!("tasks[{i}]");
        let (name, source) = match row {
            Value::Str(s) => (s.as_str(), Source::Synthetic { per_class: 16, noise: 0.05 }),
            _ => {
                let name = row
                    .get("name")
                    .ok_or_else(|| ConfigError::schema(format!("{path}.name"), "missing key"))?
                    .expect_str(&format!("{path}.name"))?;
                let source = match opt_str(row, "archive", &path)? {
                    Some(p) => Source::Archive(PathBuf::from(p)),
                    None => Source::Synthetic {
                        per_class: opt_parsed(row, "per_class", &path)?.unwrap_or(16),
                        noise: opt_parsed(row, "noise", &path)?.unwrap_or(0.05),
                    },
                };
                (name, source)
            }
        };
        if selections.iter().any(|s| s.spec.name == name) {
            return Err(ConfigError::schema(path, format!("task '{name}' selected twice")).into());
        }
        let spec = registry
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| {
                ConfigError::schema(&path, format!("unknown task '{name}' in the task table"))
            })?
            .clone();
        selections.push(Selection { spec, source });
    }

    let mut ssl = SslConfig::default();
    if let Some(sec) = root.get("ssl") {
        if let Some(s) = opt_str(sec, "objective", "ssl")? {
            ssl.objective = match s {
                "vicreg" => SslObjective::Vicreg,
                "barlow" | "barlow_twins" => SslObjective::Barlow,
                other => {
                    return Err(ConfigError::schema(
                        "ssl.objective",
                        format!("unknown objective '{other}' (vicreg or barlow)"),
                    )
                    .into())
                }
            };
        }
        if let Some(v) = opt_parsed(sec, "lambda", "ssl")? {
            ssl.lambda = v;
        }
        if let Some(v) = opt_parsed(sec, "inv_mse", "ssl")? {
            ssl.weights.inv_mse = v;
        }
        if let Some(v) = opt_parsed(sec, "inv_cos", "ssl")? {
            ssl.weights.inv_cos = v;
        }
        if let Some(v) = opt_parsed(sec, "var_coeff", "ssl")? {
            ssl.weights.var_coeff = v;
        }
        if let Some(v) = opt_parsed(sec, "cov_coeff", "ssl")? {
            ssl.weights.cov_coeff = v;
        }
        if let Some(v) = opt_parsed(sec, "gamma", "ssl")? {
            ssl.weights.gamma = v;
        }
    }

    let mut eval_split = Split::Test;
    let mut ttsa = None;
    if let Some(sec) = root.get("eval") {
        if let Some(s) = opt_str(sec, "split", "eval")? {
            eval_split = parse_split(s)?;
        }
        if let Some(k) = opt_parsed(sec, "ttsa_k", "eval")? {
            let reps = opt_parsed(sec, "ttsa_reps", "eval")?.unwrap_or(4);
            ttsa = Some((k, reps));
        }
    }

    Ok(RunSpec {
        seed,
        train: t,
        csa_k0,
        model,
        latents,
        selections,
        ssl,
        eval_split,
        ttsa,
    })
}

fn parse_model(section: Option<&Value>) -> Result<ModelConfig, ConfigError> {
    let Some(v) = section else {
        return Ok(ModelConfig::small());
    };
    let mut m = match opt_str(v, "preset", "model")? {
        None | Some("small") => ModelConfig::small(),
        Some("large") => ModelConfig::large(),
        Some(other) => {
            return Err(ConfigError::schema(
                "model.preset",
                format!("unknown preset '{other}' (small or large)"),
            ))
        }
    };
    if let Some(x) = opt_parsed(v, "hidden_dim", "model")? {
        m.hidden_dim = x;
    }
    if let Some(x) = opt_parsed(v, "main_layers", "model")? {
        m.main_layers = x;
    }
    if let Some(x) = opt_parsed(v, "adapt_in_layers", "model")? {
        m.adapt_in_layers = x;
    }
    if let Some(x) = opt_parsed(v, "adapt_out_layers", "model")? {
        m.adapt_out_layers = x;
    }
    if let Some(x) = opt_parsed(v, "num_heads", "model")? {
        m.num_heads = x;
    }
    if let Some(x) = opt_parsed(v, "mlp_ratio", "model")? {
        m.mlp_ratio = x;
    }
    if let Some(x) = opt_parsed(v, "patch_size", "model")? {
        m.patch_size = x;
    }
    if let Some(x) = opt_parsed(v, "latent_tokens", "model")? {
        m.latent_tokens = x;
    }
    if let Some(x) = opt_parsed(v, "latent_dim", "model")? {
        m.latent_dim = x;
    }
    if let Some(x) = opt_parsed(v, "dropout", "model")? {
        m.dropout = x;
    }
    if let Some(w) = v.get("expander_widths") {
        m.expander_widths = w
            .expect_seq("model.expander_widths")?
            .iter()
            .enumerate()
            .map(|(i, x)| x.expect_parsed::<usize>(&format!("model.expander_widths[{i}]")))
            .collect::<Result<_, _>>()?;
    }
    m.validate()?;
    Ok(m)
}

fn parse_split(s: &str) -> Result<Split, ConfigError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(ConfigError::schema(
            "eval.split",
            format!("unknown split '{other}' (train, val, or test)"),
        )),
    }
}

/// Parse a `K=2,reps=4` test-time augmentation spec; `reps` defaults to 4.
fn parse_ttsa(s: &str) -> Result<(usize, usize), ConfigError> {
    let mut k = None;
    let mut reps = None;
    for part in s.split(',') {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| ConfigError::schema("--ttsa", "expected K=<int>,reps=<int>"))?;
        let parsed: usize = val.trim().parse().map_err(|_| {
            ConfigError::schema("--ttsa", format!("'{}' is not an integer", val.trim()))
        })?;
        match key.trim() {
            "K" | "k" => k = Some(parsed),
            "reps" => reps = Some(parsed),
            other => {
                return Err(ConfigError::schema(
                    "--ttsa",
                    format!("unknown key '{other}' (K or reps)"),
                ))
            }
        }
    }
    let k = k.ok_or_else(|| ConfigError::schema("--ttsa", "missing K"))?;
    Ok((k, reps.unwrap_or(4)))
}

// ---------------------------------------------------------------------------
// Data assembly
// ---------------------------------------------------------------------------

fn load_splits(sel: &Selection, index: usize, seed: u64) -> Result<SplitSet<f64>, Error> {
    match &sel.source {
        Source::Archive(p) => Ok(load_medmnist_archive::<f64>(p, &sel.spec)?),
        Source::Synthetic { per_class, noise } => {
            let base = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1);
            let small = (per_class / 4).max(1);
            Ok(SplitSet {
                train: synth_dataset(&sel.spec, *per_class, *noise, base, Split::Train)?,
                val: synth_dataset(&sel.spec, small, *noise, base.wrapping_add(1), Split::Val)?,
                test: synth_dataset(&sel.spec, small, *noise, base.wrapping_add(2), Split::Test)?,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn run_supervised(args: &RunArgs, warm_start: Option<&Path>, multitask: bool) -> Result<(), Error> {
    let spec = build_run_spec(args)?;
    if multitask && spec.selections.len() < 2 {
        return Err(
            ConfigError::schema("tasks", "multitask runs need at least two tasks").into(),
        );
    }
    let task_specs: Vec<TaskSpec> = spec.selections.iter().map(|s| s.spec.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = Medformer::<f64>::new(&spec.model, &spec.latents, &task_specs, &mut rng)?;
    if let Some(path) = warm_start {
        let (copied, skipped) = load_for_finetune(path, &model)?;
        println!("warm start from {}: copied {copied} tensors, left {skipped} fresh", path.display());
    }
    let mut data = Vec::with_capacity(spec.selections.len());
    for (i, sel) in spec.selections.iter().enumerate() {
        let set = load_splits(sel, i, spec.seed)?;
        println!(
            "task {}: {} train / {} val samples",
            sel.spec.name,
            set.train.len(),
            set.val.len()
        );
        data.push(TaskData {
            train: set.train,
            val: set.val,
        });
    }

    if let Some(k0) = spec.csa_k0 {
        let stages = train_csa(&model, &data, k0, &spec.train)?;
        let out = spec.train.out.as_ref().ok_or_else(|| {
            ConfigError::schema("run.out", "staged runs need an output directory")
        })?;
        for st in &stages {
            st.report
                .write_json_lines(&out.join(format!("stage_k{}", st.k)).join("report.jsonl"))?;
            println!("stage K={}: best val loss {:.6}", st.k, st.best_metric);
        }
        save_checkpoint(&out.join("best.ckpt"), &model, None)?;
        println!("final weights -> {}", out.join("best.ckpt").display());
    } else {
        let report = train::train(&model, &data, &spec.train)?;
        summarize(&report);
        emit_report(&report, spec.train.out.as_deref())?;
    }
    Ok(())
}

fn run_ssl(args: &RunArgs) -> Result<(), Error> {
    let spec = build_run_spec(args)?;
    let task_specs: Vec<TaskSpec> = spec.selections.iter().map(|s| s.spec.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = Medformer::<f64>::new(&spec.model, &spec.latents, &task_specs, &mut rng)?;
    let expander =
        Expander::<f64>::new(spec.model.hidden_dim, &spec.model.expander_widths, &mut rng)?;
    let mut data = Vec::with_capacity(spec.selections.len());
    for (i, sel) in spec.selections.iter().enumerate() {
        let set = load_splits(sel, i, spec.seed)?;
        println!("task {}: {} train samples", sel.spec.name, set.train.len());
        data.push(set.train);
    }
    let report = train_ssl(
        &model,
        &expander,
        &data,
        &AugPipeline::standard(),
        &spec.ssl,
        &spec.train,
    )?;
    if let Some(b) = &report.best {
        println!("best mean loss {:.6} at step {}", b.metric, b.step);
    }
    emit_report(&report, spec.train.out.as_deref())?;
    Ok(())
}

fn run_eval(args: &RunArgs, from: &Path, ttsa_flag: Option<&str>) -> Result<(), Error> {
    let spec = build_run_spec(args)?;
    let ttsa = match ttsa_flag {
        Some(s) => Some(parse_ttsa(s)?),
        None => spec.ttsa,
    };
    let (model, _) = load_checkpoint::<f64>(from)?;
    let mut lines = Vec::new();
    for (i, sel) in spec.selections.iter().enumerate() {
        model.task(&sel.spec.name)?;
        let set = load_splits(sel, i, spec.seed)?;
        let ds = match spec.eval_split {
            Split::Train => &set.train,
            Split::Val => &set.val,
            Split::Test => &set.test,
        };
        let (loss, acc, auc) = match ttsa {
            None => train::evaluate(&model, ds)?,
            Some((k, reps)) => evaluate_ttsa(&model, ds, &set.train, k, reps, spec.seed)?,
        };
        let mut line = serde_json::json!({
            "task": sel.spec.name,
            "split": spec.eval_split.label(),
            "loss": loss,
            "accuracy": acc,
            "auc": auc,
        });
        if let Some((k, reps)) = ttsa {
            line["ttsa_k"] = k.into();
            line["ttsa_reps"] = reps.into();
        }
        println!("{line}");
        lines.push(line.to_string());
    }
    if let Some(out) = &spec.train.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("eval.jsonl"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

/// Like [`train::evaluate`] but every prediction averages logits over
/// sum-augmented hybrids mixing the sample with train-split partners.
fn evaluate_ttsa(
    model: &Medformer<f64>,
    ds: &Dataset<f64>,
    pool_ds: &Dataset<f64>,
    k: usize,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64, Option<f64>), Error> {
    let spec = ds.spec().clone();
    let mut pool = Vec::with_capacity(pool_ds.len());
    for i in 0..pool_ds.len() {
        pool.push(pool_ds.image(i)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7753);
    let mut loss_sum = 0.0;
    let mut decoded = Vec::with_capacity(ds.len());
    let mut scores = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    no_grad(|| -> Result<(), Error> {
        for i in 0..ds.len() {
            let x = ds.image(i)?;
            let y = ds.target(i)?;
            let logits = test_time_sum_augment(model, &spec.name, &x, &pool, k, reps, &mut rng)?;
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
        Err(e) => return Err(e.into()),
    };
    Ok((loss_sum / ds.len() as f64, acc, auc))
}

fn run_inspect(path: &Path) -> Result<(), Error> {
    let s = inspect_checkpoint(path)?;
    println!("version: {}", s.version);
    println!("config digest: {}", s.config_digest);
    println!("dtype: {}", s.dtype);
    println!("parameters: {} tensors, {} scalars", s.tensor_count, s.scalar_count);
    println!(
        "optimizer state: {}",
        if s.has_optimizer { "present" } else { "absent" }
    );
    println!(
        "model: hidden_dim {} | main layers {} | adapt in/out {}/{} | heads {} | patch {} | latent tokens {}x{}",
        s.model.hidden_dim,
        s.model.main_layers,
        s.model.adapt_in_layers,
        s.model.adapt_out_layers,
        s.model.num_heads,
        s.model.patch_size,
        s.model.latent_tokens,
        s.model.latent_dim,
    );
    println!("tasks: {}", s.task_names.join(", "));
    for (label, names) in [
        ("dimension", &s.latents.dimension),
        ("modality", &s.latents.modality),
        ("body_part", &s.latents.body_part),
        ("task", &s.latents.task),
    ] {
        println!("latents.{label}: {}", names.join(", "));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

fn summarize(report: &RunReport) {
    let evals: Vec<&ReportRecord> =
        report.records.iter().filter(|r| r.accuracy.is_some()).collect();
    if let Some(last_step) = evals.last().map(|r| r.step) {
        for r in evals.iter().filter(|r| r.step == last_step) {
            let auc = r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "{}: val loss {:.6} | accuracy {:.4} | auc {}",
                r.task,
                r.loss,
                r.accuracy.unwrap_or(f64::NAN),
                auc
            );
        }
    }
    if let Some(b) = &report.best {
        println!("best at step {} (metric {:.6})", b.step, b.metric);
    }
}

/// Write the JSON-lines report into the output directory, or to stdout
/// when no directory is configured.
fn emit_report(report: &RunReport, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(dir) => {
            let path = dir.join("report.jsonl");
            report.write_json_lines(&path)?;
            println!("report -> {}", path.display());
        }
        None => print!("{}", report.to_json_lines()?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use std::io::Write;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.yaml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    fn args_for(config: PathBuf) -> RunArgs {
        RunArgs {
            config,
            seed: None,
            steps: None,
            lr: None,
            out: None,
        }
    }

    #[test]
    fn clap_declaration_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ttsa_spec_parses_with_default_reps() {
        assert_eq!(parse_ttsa("K=2,reps=4").unwrap(), (2, 4));
        assert_eq!(parse_ttsa("k=8").unwrap(), (8, 4));
        assert!(parse_ttsa("reps=4").is_err());
        assert!(parse_ttsa("K=two").is_err());
        assert!(parse_ttsa("K=2,foo=1").is_err());
    }

    #[test]
    fn run_spec_reads_config_and_applies_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "run:\n  seed: 3\n  steps: 50\n  batch_size: 4\n  max_lr: 0.01\n  mode: backforward\n  clip_norm: none\nmodel:\n  hidden_dim: 16\n  main_layers: 1\n  adapt_in_layers: 1\n  adapt_out_layers: 1\n  num_heads: 2\n  latent_tokens: 2\n  latent_dim: 8\n  expander_widths:\n    - 16\n    - 16\ntasks:\n  - chestmnist\n  - name: retinamnist\n    per_class: 5\n    noise: 0.1\n",
        );
        let mut args = args_for(path);
        args.seed = Some(9);
        args.lr = Some(0.5);
        let spec = build_run_spec(&args).unwrap();
        assert_eq!(spec.seed, 9, "--seed beats the config");
        assert_eq!(spec.train.seed, 9);
        assert_eq!(spec.train.steps, 50);
        assert_eq!(spec.train.max_lr, 0.5, "--lr beats the config");
        assert_eq!(spec.train.mode, TrainMode::Backforward);
        assert_eq!(spec.train.clip_norm, None);
        assert_eq!(spec.model.hidden_dim, 16);
        assert_eq!(spec.model.expander_widths, vec![16, 16]);
        assert_eq!(spec.selections.len(), 2);
        assert_eq!(spec.selections[0].spec.name, "chestmnist");
        match &spec.selections[1].source {
            Source::Synthetic { per_class, noise } => {
                assert_eq!(*per_class, 5);
                assert_eq!(*noise, 0.1);
            }
            _ => panic!("expected synthetic source"),
        }
        assert_eq!(spec.eval_split, Split::Test);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "run:\n  steps: 5\ntasks:\n  - chestmnist\n");
        let err = build_run_spec(&args_for(path)).err().unwrap();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_task_and_duplicates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "run:\n  seed: 1\ntasks:\n  - sonar\n");
        let err = build_run_spec(&args_for(path)).err().unwrap();
        assert!(err.to_string().contains("unknown task 'sonar'"), "{err}");

        let path = write_config(
            dir.path(),
            "run:\n  seed: 1\ntasks:\n  - chestmnist\n  - chestmnist\n",
        );
        let err = build_run_spec(&args_for(path)).err().unwrap();
        assert!(err.to_string().contains("selected twice"), "{err}");
    }

    #[test]
    fn bad_preset_and_mode_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "run:\n  seed: 1\nmodel:\n  preset: huge\ntasks:\n  - chestmnist\n",
        );
        let err = build_run_spec(&args_for(path)).err().unwrap();
        assert!(err.to_string().contains("unknown preset 'huge'"), "{err}");

        let path = write_config(
            dir.path(),
            "run:\n  seed: 1\n  mode: sideways\ntasks:\n  - chestmnist\n",
        );
        let err = build_run_spec(&args_for(path)).err().unwrap();
        assert!(err.to_string().contains("unknown mode 'sideways'"), "{err}");
    }

    #[test]
    fn ssl_and_eval_sections_are_honored() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "run:\n  seed: 1\nssl:\n  objective: barlow\n  lambda: 0.01\neval:\n  split: val\n  ttsa_k: 2\ntasks:\n  - chestmnist\n",
        );
        let spec = build_run_spec(&args_for(path)).unwrap();
        assert_eq!(spec.ssl.objective, SslObjective::Barlow);
        assert_eq!(spec.ssl.lambda, 0.01);
        assert_eq!(spec.eval_split, Split::Val);
        assert_eq!(spec.ttsa, Some((2, 4)));
    }

    #[test]
    fn archive_source_is_selected_when_present() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "run:\n  seed: 1\ntasks:\n  - name: chestmnist\n    archive: data/chest.zip\n",
        );
        let spec = build_run_spec(&args_for(path)).unwrap();
        match &spec.selections[0].source {
            Source::Archive(p) => assert_eq!(p, &PathBuf::from("data/chest.zip")),
            _ => panic!("expected archive source"),
        }
    }
}
