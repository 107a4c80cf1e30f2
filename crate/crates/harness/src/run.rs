//! Glue shared by the CLI commands and sweeps.

use std::path::Path;

use peftsam_core::memory::memory_report;
use peftsam_core::peft::count_params;
use peftsam_core::samlite::SamLite;
use peftsam_core::synth::{Dataset, Sample, Task};
use peftsam_core::{Error, Result};

use crate::checkpoint::{load_base_weights, Checkpoint};
use crate::config::{EvalTask, ExperimentConfig};
use crate::evaluate::{evaluate, check_tasks, EvalOutput, RecordMeta};
use crate::train::{train_model, validation_score, EpochLog, TrainOutcome};

/// The untrained model for `cfg`: seeded base weights, or the weights of
/// `cfg.init`, with the PEFT method applied.
pub fn build_model(cfg: &ExperimentConfig) -> Result<SamLite<f32>> {
    let mc = cfg.model_config()?;
    let mut base = SamLite::build_base(mc, cfg.seed)?;
    if let Some(init) = &cfg.init {
        base.load_values(&load_base_weights(init)?)?;
    }
    match &cfg.peft {
        Some(p) => base.adapt(p, cfg.seed),
        None => Ok(base),
    }
}

pub fn open_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    Dataset::open(path)
}

pub fn default_tasks(task: Task) -> Vec<EvalTask> {
    match task {
        Task::Instance => EvalTask::ALL.to_vec(),
        Task::Semantic => EvalTask::ALL[1..].to_vec(),
    }
}

pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

/// Loads data, trains, and packages the best parameters as a checkpoint.
/// `n_train` limits the training split to its first images.
pub fn train_run(cfg: &ExperimentConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainedRun> {
    let mut cfg = cfg.clone();
    cfg.validate_for_training()?;
    let data = open_data(&cfg)?;
    if cfg.tasks.is_empty() {
        cfg.tasks = default_tasks(data.manifest.task);
    }
    check_tasks(&cfg.tasks, data.manifest.task)?;
    cfg.train.instance_head = cfg.tasks.contains(&EvalTask::Ais);
    let mut train = data.load("train")?;
    if let Some(n) = cfg.n_train {
        if n > train.len() {
            return Err(Error::Data(format!("n_train {n} exceeds the {} training images", train.len())));
        }
        train.truncate(n);
    }
    let val = data.load("val")?;
    let model = build_model(&cfg)?;
    let head = cfg.train.instance_head;
    let seed = cfg.seed;
    let mut validate = |m: &SamLite<f32>| -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        validation_score(m, &val, head, seed)
    };
    let outcome = train_model(model, &train, &cfg.train, &mut validate, on_epoch)?;
    let checkpoint = Checkpoint {
        config: cfg,
        training: Some(outcome.summary.clone()),
        model: outcome.best.clone(),
    };
    Ok(TrainedRun { checkpoint, outcome })
}

pub fn record_meta(ck: &Checkpoint) -> Result<RecordMeta> {
    let report = memory_report(&ck.model)?;
    Ok(RecordMeta {
        experiment: ck.config.experiment_id(),
        method: ck.config.method_name(),
        seed: ck.config.seed,
        params_trainable: count_params(&ck.model.store).trainable_params as u64,
        act_bytes: report.total_activation_bytes,
        epochs_run: ck.training.as_ref().map_or(0, |t| t.epochs_run),
        stop_reason: ck.training.as_ref().map_or("untrained".into(), |t| t.stop_reason.clone()),
    })
}

/// Evaluates a checkpoint on the test split of `data`.
pub fn eval_checkpoint(
    ck: &Checkpoint,
    data: &Dataset,
    tasks: &[EvalTask],
    corrections: usize,
    seed: u64,
) -> Result<EvalOutput> {
    let test: Vec<Sample> = data.load("test")?;
    let meta = record_meta(ck)?;
    evaluate(
        &ck.model,
        &test,
        data.manifest.task,
        data.manifest.metric,
        tasks,
        corrections,
        seed,
        &meta,
    )
}

pub fn eval_path(ckpt: &Path, data: &Path, tasks: &[EvalTask], corrections: usize, seed: u64) -> Result<EvalOutput> {
    let ck = Checkpoint::load(ckpt)?;
    let data = Dataset::open(data)?;
    eval_checkpoint(&ck, &data, tasks, corrections, seed)
}
